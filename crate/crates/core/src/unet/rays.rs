//! Per-pixel Plücker ray encodings of a camera.

use candle_core::{DType, Device, Tensor};

use crate::error::Result;
use crate::scenegen::camera::{cross, CameraPose};

pub const RAY_CHANNELS: usize = 6;

/// `6×h×w` channel-major map of `(d, o × d)` for the ray through each pixel
/// centre, `d` the unit world direction and `o` the camera centre.
pub fn ray_map(cam: &CameraPose, height: usize, width: usize) -> Vec<f64> {
    let cam = cam.resized(height, width);
    let [right, up, forward] = cam.basis();
    let origin = cam.position();
    let (cx, cy) = cam.principal_point();
    let plane = height * width;
    let mut out = vec![0.0; RAY_CHANNELS * plane];
    for i in 0..height {
        for j in 0..width {
            let x = (j as f64 + 0.5 - cx) / cam.focal;
            let y = -(i as f64 + 0.5 - cy) / cam.focal;
            let mut d = [0.0; 3];
            for k in 0..3 {
                d[k] = x * right[k] + y * up[k] + forward[k];
            }
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            d.iter_mut().for_each(|v| *v /= norm);
            let m = cross(origin, d);
            let p = i * width + j;
            for k in 0..3 {
                out[k * plane + p] = d[k];
                out[(3 + k) * plane + p] = m[k];
            }
        }
    }
    out
}

/// Batched ray maps, `(N, 6, h, w)`.
pub fn ray_tensor(cams: &[CameraPose], height: usize, width: usize, dtype: DType) -> Result<Tensor> {
    let data: Vec<f64> = cams.iter().flat_map(|c| ray_map(c, height, width)).collect();
    Ok(Tensor::from_vec(data, (cams.len(), RAY_CHANNELS, height, width), &Device::Cpu)?.to_dtype(dtype)?)
}
