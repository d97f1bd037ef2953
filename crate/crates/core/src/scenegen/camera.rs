use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Near-plane depth below which geometry is clipped.
pub const NEAR: f64 = 1e-3;

/// A pinhole camera on an orbit around the world origin, looking at it.
///
/// Azimuth 0 and elevation 0 place the camera on the +z axis looking down −z.
/// The principal point is the image centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
    /// Focal length in pixels.
    pub focal: f64,
    pub height: usize,
    pub width: usize,
}

/// Camera-frame coordinates: `x` right, `y` up, `depth` along the view axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPoint {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
}

impl CameraPose {
    pub fn validate(&self, bounding_radius: f64) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Input(format!("image size {}x{} below 16x16", self.height, self.width)));
        }
        if !(self.radius > bounding_radius) || !(self.focal > 0.0) {
            return Err(Error::Input(format!(
                "camera radius {} must exceed object radius {bounding_radius} and focal must be positive",
                self.radius
            )));
        }
        if ![self.azimuth, self.elevation].iter().all(|v| v.is_finite()) {
            return Err(Error::Input("camera angles must be finite".into()));
        }
        Ok(())
    }

    pub fn position(&self) -> [f64; 3] {
        let (se, ce) = self.elevation.sin_cos();
        let (sa, ca) = self.azimuth.sin_cos();
        [self.radius * ce * sa, self.radius * se, self.radius * ce * ca]
    }

    /// Orthonormal `(right, up, forward)` basis in world coordinates.
    pub fn basis(&self) -> [[f64; 3]; 3] {
        let c = self.position();
        let forward = normalize([-c[0], -c[1], -c[2]]);
        let mut right = cross(forward, [0.0, 1.0, 0.0]);
        if dot(right, right) < 1e-18 {
            // Looking straight up or down; any horizontal right vector works.
            right = [1.0, 0.0, 0.0];
        }
        let right = normalize(right);
        let up = cross(right, forward);
        [right, up, forward]
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    pub fn to_camera(&self, p: [f64; 3]) -> CameraPoint {
        let c = self.position();
        let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        let [r, u, f] = self.basis();
        CameraPoint { x: dot(d, r), y: dot(d, u), depth: dot(d, f) }
    }

    /// Pixel coordinates (continuous; pixel `(i, j)` covers `[j, j+1) × [i, i+1)`)
    /// of a camera-frame point in front of the near plane.
    pub fn project_camera(&self, q: CameraPoint) -> Option<(f64, f64)> {
        if q.depth <= NEAR {
            return None;
        }
        let (cx, cy) = self.principal_point();
        Some((cx + self.focal * q.x / q.depth, cy - self.focal * q.y / q.depth))
    }

    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let q = self.to_camera(p);
        self.project_camera(q).map(|(u, v)| (u, v, q.depth))
    }

    /// The same camera at a different raster resolution (focal rescaled).
    pub fn resized(&self, height: usize, width: usize) -> Self {
        Self { focal: self.focal * width as f64 / self.width as f64, height, width, ..*self }
    }
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam(az: f64, el: f64) -> CameraPose {
        CameraPose { azimuth: az, elevation: el, radius: 3.0, focal: 80.0, height: 64, width: 64 }
    }

    #[test]
    fn origin_projects_to_principal_point() {
        for (az, el) in [(0.0, 0.0), (1.0, 0.3), (-2.0, -0.4)] {
            let (u, v, d) = cam(az, el).project([0.0; 3]).unwrap();
            assert!((u - 32.0).abs() < 1e-9 && (v - 32.0).abs() < 1e-9);
            assert!((d - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn front_camera_axes() {
        let c = cam(0.0, 0.0);
        assert_eq!(c.position(), [0.0, 0.0, 3.0]);
        let (u, v, _) = c.project([0.5, 0.5, 0.0]).unwrap();
        assert!(u > 32.0 && v < 32.0, "+x right, +y up");
        assert!(c.project([0.0, 0.0, 4.0]).is_none());
    }

    #[test]
    fn validation() {
        assert!(cam(0.0, 0.0).validate(1.0).is_ok());
        assert!(cam(0.0, 0.0).validate(3.5).is_err());
        assert!(CameraPose { height: 8, ..cam(0.0, 0.0) }.validate(1.0).is_err());
    }
}
