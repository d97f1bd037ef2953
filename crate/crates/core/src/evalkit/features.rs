//! Frozen, seeded random convolutional features behind the perceptual-distance
//! and Fréchet-distance proxies. Plain `f64` arithmetic so values are
//! reproducible bit-for-bit on any platform with IEEE doubles.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureNetSpec {
    pub seed: u64,
    /// Output channels of each 3×3 convolution level.
    pub widths: Vec<usize>,
    /// Stride of each level.
    pub strides: Vec<usize>,
}

impl Default for FeatureNetSpec {
    fn default() -> Self {
        Self { seed: 0x5eed_f00d, widths: vec![16, 32, 64], strides: vec![2, 2, 2] }
    }
}

struct Level {
    cin: usize,
    cout: usize,
    stride: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// One feature level: `c×h×w`, channel-major.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

pub struct FeatureNet {
    levels: Vec<Level>,
}

impl FeatureNet {
    pub fn new(spec: &FeatureNetSpec) -> Result<Self> {
        if spec.widths.is_empty() || spec.widths.len() != spec.strides.len() || spec.strides.contains(&0) {
            return Err(Error::Config("feature net widths/strides must be non-empty and aligned".into()));
        }
        let mut cin = 3;
        let mut levels = Vec::new();
        for (i, (&cout, &stride)) in spec.widths.iter().zip(&spec.strides).enumerate() {
            let mut rng = seed::rng(spec.seed, &[i as u64]);
            let he = Normal::new(0.0, (2.0 / (cin * 9) as f64).sqrt()).expect("valid std");
            let weights = (0..cout * cin * 9).map(|_| he.sample(&mut rng)).collect();
            let bias = (0..cout).map(|_| 0.1 * he.sample(&mut rng)).collect();
            levels.push(Level { cin, cout, stride, weights, bias });
            cin = cout;
        }
        Ok(Self { levels })
    }

    /// Per-level ReLU feature maps for an image mapped to `[-1, 1]`.
    pub fn features(&self, img: &Image) -> Vec<FeatureMap> {
        let (h, w) = img.dims();
        let mut cur = FeatureMap { channels: 3, height: h, width: w, data: vec![0.0; 3 * h * w] };
        for (i, v) in img.data().iter().enumerate() {
            let (p, c) = (i / 3, i % 3);
            cur.data[c * h * w + p] = *v as f64 * 2.0 - 1.0;
        }
        let mut out = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            cur = conv3x3_relu(&cur, level);
            out.push(cur.clone());
        }
        out
    }

    /// Global average of the last level: the pooled descriptor for Fréchet distance.
    pub fn pooled(&self, img: &Image) -> Vec<f64> {
        let f = self.features(img).pop().expect("at least one level");
        let n = (f.height * f.width) as f64;
        f.data.chunks_exact(f.height * f.width).map(|c| c.iter().sum::<f64>() / n).collect()
    }
}

fn conv3x3_relu(x: &FeatureMap, l: &Level) -> FeatureMap {
    debug_assert_eq!(x.channels, l.cin);
    let (h, w) = (x.height, x.width);
    let oh = h.div_ceil(l.stride);
    let ow = w.div_ceil(l.stride);
    let mut data = vec![0.0; l.cout * oh * ow];
    for co in 0..l.cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = l.bias[co];
                for ci in 0..l.cin {
                    let wbase = (co * l.cin + ci) * 9;
                    let xbase = ci * h * w;
                    for ky in 0..3 {
                        let iy = (oy * l.stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * l.stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += l.weights[wbase + ky * 3 + kx] * x.data[xbase + iy as usize * w + ix as usize];
                        }
                    }
                }
                data[co * oh * ow + oy * ow + ox] = acc.max(0.0);
            }
        }
    }
    FeatureMap { channels: l.cout, height: oh, width: ow, data }
}

/// Unit-normalizes each pixel's channel vector in place.
fn unit_normalize(f: &mut FeatureMap) {
    let plane = f.height * f.width;
    for p in 0..plane {
        let norm = (0..f.channels).map(|c| f.data[c * plane + p].powi(2)).sum::<f64>().sqrt() + 1e-10;
        for c in 0..f.channels {
            f.data[c * plane + p] /= norm;
        }
    }
}

/// Perceptual distance proxy: per level, channel-unit-normalized features,
/// squared distance summed over channels and averaged over pixels; then
/// averaged over levels.
pub fn lpips_proxy(net: &FeatureNet, a: &Image, b: &Image) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?}", a.dims()), format!("{:?}", b.dims())));
    }
    let (fa, fb) = (net.features(a), net.features(b));
    let mut total = 0.0;
    for (mut x, mut y) in fa.into_iter().zip(fb) {
        unit_normalize(&mut x);
        unit_normalize(&mut y);
        let plane = (x.height * x.width) as f64;
        total += x.data.iter().zip(&y.data).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / plane;
    }
    Ok(total / net.levels.len() as f64)
}

/// Diagonal ridge added to every covariance before the Fréchet formula.
pub const COVARIANCE_SHRINKAGE: f64 = 1e-6;

/// Mean and (unbiased) covariance of row vectors.
pub fn moments(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if rows.len() < 2 {
        return Err(Error::Input(format!("need at least 2 feature vectors, got {}", rows.len())));
    }
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mu = DVector::zeros(d);
    for r in rows {
        mu += DVector::from_column_slice(r);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        let c = DVector::from_column_slice(r) - &mu;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    Ok((mu, cov))
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μa−μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2})`, with `Σ ← Σ + 1e-6·I`.
///
/// The cross term uses `Tr((√Σa Σb √Σa)^{1/2})`, which equals
/// `Tr((Σa Σb)^{1/2})` and only needs symmetric eigendecompositions.
pub fn frechet_distance(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> f64 {
    let d = mu_a.len();
    let eye = DMatrix::<f64>::identity(d, d) * COVARIANCE_SHRINKAGE;
    let ca = cov_a + &eye;
    let cb = cov_b + &eye;
    let sa = sqrt_psd(&ca);
    let inner = &sa * &cb * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    diff.dot(&diff) + ca.trace() + cb.trace() - 2.0 * cross
}

/// Fréchet distance between pooled feature distributions of two image sets.
pub fn fid_proxy(net: &FeatureNet, set_a: &[&Image], set_b: &[&Image]) -> Result<f64> {
    if set_a.len() < 2 || set_b.len() < 2 {
        return Err(Error::Input("fid_proxy needs at least 2 images per set".into()));
    }
    let fa: Vec<Vec<f64>> = set_a.iter().map(|i| net.pooled(i)).collect();
    let fb: Vec<Vec<f64>> = set_b.iter().map(|i| net.pooled(i)).collect();
    let (ma, ca) = moments(&fa)?;
    let (mb, cb) = moments(&fb)?;
    Ok(frechet_distance(&ma, &ca, &mb, &cb))
}
