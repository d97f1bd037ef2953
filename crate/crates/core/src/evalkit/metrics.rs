//! Pairwise image metrics: L1, PSNR and single-scale SSIM.

use crate::error::{Error, Result};
use crate::image::Image;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?}", a.dims()), format!("{:?}", b.dims())));
    }
    Ok(())
}

/// Mean absolute difference over all elements.
pub fn metric_l1(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum();
    Ok(sum / a.data().len() as f64)
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    Ok(sum / a.data().len() as f64)
}

pub fn psnr_from_mse(mse: f64, cap: f64) -> f64 {
    if mse <= 0.0 {
        cap
    } else {
        (10.0 * (1.0 / mse).log10()).min(cap)
    }
}

/// `10·log10(1/MSE)` for unit-range images; identical images give `cap`.
pub fn metric_psnr(a: &Image, b: &Image, cap: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, cap))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Rec. 601 luma.
pub fn luma(img: &Image) -> Vec<f64> {
    img.data().chunks_exact(3).map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).collect()
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filter of a `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM on luma: 11×11 Gaussian window (σ = 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1, averaged over all fully-contained windows.
pub fn metric_ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Input(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}")));
    }
    let (x, y) = (luma(a), luma(b));
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_valid(&x, h, w, &taps);
    let my = filter_valid(&y, h, w, &taps);
    let mxx = filter_valid(&prod(&x, &x), h, w, &taps);
    let myy = filter_valid(&prod(&y, &y), h, w, &taps);
    let mxy = filter_valid(&prod(&x, &y), h, w, &taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Image::from_vec(h, w, (0..h * w * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn l1_values() {
        let a = random(1, 8, 8);
        assert_eq!(metric_l1(&a, &a).unwrap(), 0.0);
        assert_eq!(metric_l1(&Image::filled(4, 4, 0.0), &Image::filled(4, 4, 1.0)).unwrap(), 1.0);
        let b = random(2, 8, 8);
        let mut s = 0.0;
        for i in 0..a.data().len() {
            s += (a.data()[i] as f64 - b.data()[i] as f64).abs();
        }
        assert!((metric_l1(&a, &b).unwrap() - s / 192.0).abs() < 1e-9);
        assert!(metric_l1(&a, &random(3, 8, 9)).is_err());
    }

    #[test]
    fn psnr_values() {
        let a = random(1, 8, 8);
        assert_eq!(metric_psnr(&a, &a, PSNR_CAP).unwrap(), 99.0);
        assert_eq!(metric_psnr(&Image::filled(4, 4, 0.0), &Image::filled(4, 4, 1.0), PSNR_CAP).unwrap(), 0.0);
        let p = metric_psnr(&Image::filled(4, 4, 0.25), &Image::filled(4, 4, 0.75), PSNR_CAP).unwrap();
        assert!((p - 6.020599913279624).abs() < 1e-9, "{p}");
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = random(4, 16, 16);
        assert!((metric_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let c1 = 1e-4;
        let expected = c1 / (1.0 + c1);
        let v = metric_ssim(&Image::filled(16, 16, 0.0), &Image::filled(16, 16, 1.0)).unwrap();
        assert!((v - expected).abs() < 1e-9, "{v} vs {expected}");
        assert!(metric_ssim(&random(1, 10, 16), &random(2, 10, 16)).is_err());
    }

    #[test]
    fn ssim_symmetric() {
        let (a, b) = (random(5, 20, 24), random(6, 20, 24));
        assert_eq!(metric_ssim(&a, &b).unwrap(), metric_ssim(&b, &a).unwrap());
    }
}
