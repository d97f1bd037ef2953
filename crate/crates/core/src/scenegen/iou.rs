use crate::error::{Error, Result};
use crate::image::Image;

/// Minimum per-channel deviation from white counted as foreground.
pub const FOREGROUND_THRESHOLD: f32 = 2.0 / 255.0;

/// Half-open pixel box `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn intersection(&self, other: &Self) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }
}

pub fn foreground_mask(img: &Image) -> Vec<bool> {
    img.data().chunks_exact(3).map(|p| p.iter().map(|v| 1.0 - v).fold(0.0f32, f32::max) > FOREGROUND_THRESHOLD).collect()
}

pub fn mask_bbox(mask: &[bool], width: usize) -> Option<BoundingBox> {
    let mut b: Option<BoundingBox> = None;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (y, x) = (i / width, i % width);
        b = Some(match b {
            None => BoundingBox { x0: x, y0: y, x1: x + 1, y1: y + 1 },
            Some(b) => BoundingBox { x0: b.x0.min(x), y0: b.y0.min(y), x1: b.x1.max(x + 1), y1: b.y1.max(y + 1) },
        });
    }
    b
}

/// IoU of two optional boxes: both empty gives 1, exactly one empty gives 0.
pub fn box_iou(a: Option<BoundingBox>, b: Option<BoundingBox>) -> f64 {
    match (a, b) {
        (None, None) => 1.0,
        (Some(a), Some(b)) => {
            let inter = a.intersection(&b) as f64;
            inter / (a.area() as f64 + b.area() as f64 - inter)
        }
        _ => 0.0,
    }
}

/// IoU of the foreground bounding boxes of an object render and a skeleton render.
pub fn compute_bbox_iou(object_img: &Image, skeleton_img: &Image) -> Result<f64> {
    if object_img.dims() != skeleton_img.dims() {
        return Err(Error::shape(format!("{:?}", object_img.dims()), format!("{:?}", skeleton_img.dims())));
    }
    let w = object_img.width();
    Ok(box_iou(mask_bbox(&foreground_mask(object_img), w), mask_bbox(&foreground_mask(skeleton_img), w)))
}
