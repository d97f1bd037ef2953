//! Plain RGB float images, the currency of the renderer, codec and metrics.

use std::path::Path;

use crate::error::{Error, Result};

/// An `H×W×3` image with channel-interleaved values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    /// A white image; white is the background everywhere in this crate.
    pub fn white(height: usize, width: usize) -> Self {
        Self::filled(height, width, 1.0)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self { height, width, data: vec![value; height * width * 3] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(height * width * 3, data.len()));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("image values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image from arbitrary values, clamping into `[0, 1]`.
    /// Non-finite values become 0.
    pub fn from_vec_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(height * width * 3, data.len()));
        }
        for v in data.iter_mut() {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Alpha-composites `rgb` over the pixel with coverage `alpha`.
    #[inline]
    pub fn blend(&mut self, y: usize, x: usize, rgb: [f32; 3], alpha: f32) {
        if alpha <= 0.0 {
            return;
        }
        let a = alpha.min(1.0);
        let i = (y * self.width + x) * 3;
        for (d, v) in self.data[i..i + 3].iter_mut().zip(rgb) {
            *d = *d * (1.0 - a) + v * a;
        }
    }

    /// Horizontal mirror.
    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, self.width - 1 - x, self.pixel(y, x));
            }
        }
        out
    }

    /// Round-trips the values through 8-bit storage.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect();
        Self { height: self.height, width: self.width, data }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * 3 {
            return Err(Error::shape(height * width * 3, bytes.len()));
        }
        let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        Ok(Self { height, width, data })
    }

    /// Writes an 8-bit RGB PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        image::save_buffer(path, &self.to_rgb8(), self.width as u32, self.height as u32, image::ExtendedColorType::Rgb8)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                e => Error::Data(format!("cannot read {}: {e}", path.display())),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(h as usize, w as usize, img.as_raw())
    }

    /// Stacks images side by side, separated by `gap` white columns.
    pub fn hstack(images: &[&Image], gap: usize) -> Result<Self> {
        let Some(first) = images.first() else {
            return Err(Error::Input("nothing to stack".into()));
        };
        let h = first.height;
        if images.iter().any(|i| i.height != h) {
            return Err(Error::Input("hstack needs equal heights".into()));
        }
        let width = images.iter().map(|i| i.width).sum::<usize>() + gap * (images.len() - 1);
        let mut out = Image::white(h, width);
        let mut x0 = 0;
        for img in images {
            for y in 0..h {
                for x in 0..img.width {
                    out.set_pixel(y, x0 + x, img.pixel(y, x));
                }
            }
            x0 += img.width + gap;
        }
        Ok(out)
    }

    /// Stacks images vertically, separated by `gap` white rows.
    pub fn vstack(images: &[Image], gap: usize) -> Result<Self> {
        let Some(first) = images.first() else {
            return Err(Error::Input("nothing to stack".into()));
        };
        let w = first.width;
        if images.iter().any(|i| i.width != w) {
            return Err(Error::Input("vstack needs equal widths".into()));
        }
        let height = images.iter().map(|i| i.height).sum::<usize>() + gap * (images.len() - 1);
        let mut out = Image::white(height, w);
        let mut y0 = 0;
        for img in images {
            for y in 0..img.height {
                for x in 0..w {
                    out.set_pixel(y0 + y, x, img.pixel(y, x));
                }
            }
            y0 += img.height + gap;
        }
        Ok(out)
    }
}

#[inline]
fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range() {
        assert!(Image::from_vec(1, 1, vec![0.0, 1.5, 0.2]).is_err());
        assert!(Image::from_vec(1, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn png_round_trip_is_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let data: Vec<f32> = (0..4 * 5 * 3).map(|i| (i as f32 * 0.37) % 1.0).collect();
        let img = Image::from_vec(4, 5, data).unwrap();
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn flip_is_involution() {
        let data: Vec<f32> = (0..3 * 4 * 3).map(|i| i as f32 / 36.0).collect();
        let img = Image::from_vec(3, 4, data).unwrap();
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().pixel(1, 0), img.pixel(1, 3));
    }
}
