//! Noise schedule, forward noising, the conditional noise-prediction loss and
//! DDPM/DDIM samplers.

use candle_core::{DType, Device, Tensor};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{GlobalEmbedding, Latent, SkeletonEmbedding};
use crate::error::{Error, Result};
use crate::scenegen::CameraPose;
use crate::seed;
use crate::unet::{Conditioning, UNet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 256, beta_min: 1e-4, beta_max: 2e-2 }
    }
}

/// Linear beta schedule with cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!("schedule needs at least 2 steps, got {steps}")));
    }
    if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!("need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")));
    }
    let betas: Vec<f64> = (0..steps).map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64).collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { betas, alphas, alpha_bars })
}

impl NoiseSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        make_schedule(cfg.steps, cfg.beta_min, cfg.beta_max)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }
}

/// `sqrt(ᾱ)·z0 + sqrt(1−ᾱ)·eps` for an explicit `ᾱ`.
pub fn q_sample_with(z0: &Latent, alpha_bar: f64, eps: &Latent) -> Result<Latent> {
    if z0.dims() != eps.dims() {
        return Err(Error::shape(format!("{:?}", z0.dims()), format!("{:?}", eps.dims())));
    }
    let (a, b) = (alpha_bar.sqrt() as f32, (1.0 - alpha_bar).sqrt() as f32);
    let data = z0.data.iter().zip(&eps.data).map(|(z, e)| a * z + b * e).collect();
    Latent::new(z0.channels, z0.height, z0.width, data)
}

pub fn q_sample(z0: &Latent, t: usize, eps: &Latent, sched: &NoiseSchedule) -> Result<Latent> {
    let ab = *sched.alpha_bars.get(t).ok_or_else(|| Error::Input(format!("timestep {t} >= {}", sched.len())))?;
    q_sample_with(z0, ab, eps)
}

/// Batched `q_sample` on `(N, c, h, w)` tensors with per-row timesteps.
pub fn q_sample_tensor(z0: &Tensor, t: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if z0.dims() != eps.dims() {
        return Err(Error::shape(format!("{:?}", z0.dims()), format!("{:?}", eps.dims())));
    }
    let n = z0.dim(0)?;
    if t.len() != n {
        return Err(Error::Input(format!("{n} rows but {} timesteps", t.len())));
    }
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for &ti in t {
        let ab = *sched.alpha_bars.get(ti).ok_or_else(|| Error::Input(format!("timestep {ti} >= {}", sched.len())))?;
        a.push(ab.sqrt());
        b.push((1.0 - ab).sqrt());
    }
    let col = |v: Vec<f64>| -> Result<Tensor> { Ok(Tensor::from_vec(v, (n, 1, 1, 1), &Device::Cpu)?.to_dtype(z0.dtype())?) };
    Ok((z0.broadcast_mul(&col(a)?)? + eps.broadcast_mul(&col(b)?)?)?)
}

/// One source view with its N targets, ready for the loss.
#[derive(Debug, Clone)]
pub struct DiffusionBatch {
    pub z_src: Latent,
    pub z_tgt: Vec<Latent>,
    pub skeletons: Vec<SkeletonEmbedding>,
    pub global: GlobalEmbedding,
    pub t: Vec<usize>,
    pub eps: Vec<Latent>,
    pub cameras: Vec<CameraPose>,
}

impl DiffusionBatch {
    pub fn len(&self) -> usize {
        self.z_tgt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z_tgt.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.z_tgt.len();
        if n == 0 {
            return Err(Error::Input("diffusion batch has no targets".into()));
        }
        if self.skeletons.len() != n || self.t.len() != n || self.eps.len() != n {
            return Err(Error::Input(format!(
                "batch sizes differ: {n} targets, {} skeletons, {} timesteps, {} noise",
                self.skeletons.len(),
                self.t.len(),
                self.eps.len()
            )));
        }
        if !self.cameras.is_empty() && self.cameras.len() != n {
            return Err(Error::Input(format!("{n} targets but {} cameras", self.cameras.len())));
        }
        Ok(())
    }
}

/// Anything that predicts noise from stacked per-target inputs.
pub trait Denoiser {
    fn dtype(&self) -> DType;
    fn predict(&self, z_t: &Tensor, t: &[usize], cond: &Conditioning) -> Result<Tensor>;
}

impl Denoiser for UNet {
    fn dtype(&self) -> DType {
        UNet::dtype(self)
    }

    fn predict(&self, z_t: &Tensor, t: &[usize], cond: &Conditioning) -> Result<Tensor> {
        self.forward(z_t, t, cond)
    }
}

/// Stacks every target of every batch along the leading axis.
pub struct Stacked {
    pub z0: Tensor,
    pub eps: Tensor,
    pub t: Vec<usize>,
    pub cond: Conditioning,
}

pub fn stack(batches: &[DiffusionBatch], dtype: DType) -> Result<Stacked> {
    if batches.is_empty() {
        return Err(Error::Input("no diffusion batches".into()));
    }
    for b in batches {
        b.validate()?;
    }
    let to = |ls: Vec<&Latent>| -> Result<Tensor> { Ok(Latent::batch(&ls)?.to_dtype(dtype)?) };
    let z0 = to(batches.iter().flat_map(|b| b.z_tgt.iter()).collect())?;
    let eps = to(batches.iter().flat_map(|b| b.eps.iter()).collect())?;
    let z_src = to(batches.iter().flat_map(|b| std::iter::repeat_n(&b.z_src, b.len())).collect())?;
    let skeleton = to(batches.iter().flat_map(|b| b.skeletons.iter().map(|s| &s.0)).collect())?;
    let global: Vec<f32> = batches.iter().flat_map(|b| std::iter::repeat_n(&b.global.0, b.len())).flatten().copied().collect();
    let n = z0.dim(0)?;
    let e = global.len() / n;
    let global = Tensor::from_vec(global, (n, e), &Device::Cpu)?.to_dtype(dtype)?;
    let cameras = if batches.iter().all(|b| b.cameras.len() == b.len()) {
        Some(batches.iter().flat_map(|b| b.cameras.iter().copied()).collect())
    } else {
        None
    };
    let t = batches.iter().flat_map(|b| b.t.iter().copied()).collect();
    Ok(Stacked { z0, eps, t, cond: Conditioning { z_src, skeleton, global, cameras } })
}

/// Per-target mean squared error between the drawn noise and the prediction, `(N,)`.
pub fn per_target_loss(batches: &[DiffusionBatch], model: &dyn Denoiser, sched: &NoiseSchedule) -> Result<Tensor> {
    let s = stack(batches, model.dtype())?;
    let z_t = q_sample_tensor(&s.z0, &s.t, &s.eps, sched)?;
    let pred = model.predict(&z_t, &s.t, &s.cond)?;
    if pred.dims() != s.eps.dims() {
        return Err(Error::shape(format!("{:?}", s.eps.dims()), format!("{:?}", pred.dims())));
    }
    Ok((pred - &s.eps)?.sqr()?.flatten_from(1)?.mean(1)?)
}

/// Mean over targets and elements of `‖ε − ε_θ(z_t, t, s, z_src, g)‖²`.
pub fn training_loss(batches: &[DiffusionBatch], model: &dyn Denoiser, sched: &NoiseSchedule) -> Result<Tensor> {
    Ok(per_target_loss(batches, model, sched)?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { kind: SamplerKind::Ddim, steps: 50, eta: 0.0, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > sched.len() {
            return Err(Error::Config(format!("sampler steps must be in 1..={}, got {}", sched.len(), self.steps)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta must be in [0, 1], got {}", self.eta)));
        }
        Ok(())
    }
}

/// Descending timesteps visited by a sampler with `steps` evaluations.
pub fn timesteps(total: usize, steps: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = (0..steps).map(|i| i * total / steps).collect();
    ts.dedup();
    ts.reverse();
    ts
}

fn randn_latent(seed: u64, dims: (usize, usize, usize)) -> Vec<f32> {
    let mut rng = seed::rng(seed, &[]);
    (0..dims.0 * dims.1 * dims.2).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Noise seed of one target: depends on the sampler seed and the skeleton
/// content, never on the target's slot, so reordering targets reorders outputs.
pub fn target_seed(seed: u64, skeleton: &SkeletonEmbedding) -> u64 {
    let digest = seed::fnv1a(skeleton.0.data.iter().flat_map(|v| v.to_le_bytes()));
    seed::derive(seed, &[digest])
}

/// Everything one target is generated from.
#[derive(Debug, Clone, Copy)]
pub struct TargetCondition<'a> {
    pub z_src: &'a Latent,
    pub skeleton: &'a SkeletonEmbedding,
    pub global: &'a GlobalEmbedding,
    pub camera: Option<CameraPose>,
}

/// Generates one latent per skeleton of a single source view.
#[allow(clippy::too_many_arguments)]
pub fn sample(
    model: &dyn Denoiser,
    z_src: &Latent,
    skeletons: &[SkeletonEmbedding],
    global: &GlobalEmbedding,
    cameras: Option<&[CameraPose]>,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Vec<Latent>> {
    if let Some(c) = cameras {
        if c.len() != skeletons.len() {
            return Err(Error::Input(format!("{} skeletons but {} cameras", skeletons.len(), c.len())));
        }
    }
    let targets: Vec<TargetCondition> = skeletons
        .iter()
        .enumerate()
        .map(|(j, s)| TargetCondition { z_src, skeleton: s, global, camera: cameras.map(|c| c[j]) })
        .collect();
    sample_targets(model, &targets, cfg, sched)
}

/// Runs the reverse process for independent targets in one batch. Each
/// target's noise comes from [`target_seed`], so results do not depend on
/// which other targets share the batch.
pub fn sample_targets(
    model: &dyn Denoiser,
    targets: &[TargetCondition],
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Vec<Latent>> {
    cfg.validate(sched)?;
    let n = targets.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let dims = targets[0].z_src.dims();
    for tc in targets {
        if tc.z_src.dims() != dims || tc.skeleton.0.dims() != dims {
            return Err(Error::shape(format!("{dims:?}"), format!("{:?} / {:?}", tc.z_src.dims(), tc.skeleton.0.dims())));
        }
    }
    let dtype = model.dtype();
    let seeds: Vec<u64> = targets.iter().map(|tc| target_seed(cfg.seed, tc.skeleton)).collect();
    let shape = (n, dims.0, dims.1, dims.2);
    let init: Vec<f32> = seeds.iter().flat_map(|s| randn_latent(*s, dims)).collect();
    let mut x = Tensor::from_vec(init, shape, &Device::Cpu)?.to_dtype(dtype)?;

    let src: Vec<&Latent> = targets.iter().map(|tc| tc.z_src).collect();
    let skel: Vec<&Latent> = targets.iter().map(|tc| &tc.skeleton.0).collect();
    let e = targets[0].global.0.len();
    if targets.iter().any(|tc| tc.global.0.len() != e) {
        return Err(Error::Input("global embeddings differ in length".into()));
    }
    let g: Vec<f32> = targets.iter().flat_map(|tc| tc.global.0.iter().copied()).collect();
    let cameras: Option<Vec<CameraPose>> = targets.iter().map(|tc| tc.camera).collect();
    let cond = Conditioning {
        z_src: Latent::batch(&src)?.to_dtype(dtype)?,
        skeleton: Latent::batch(&skel)?.to_dtype(dtype)?,
        global: Tensor::from_vec(g, (n, e), &Device::Cpu)?.to_dtype(dtype)?,
        cameras,
    };

    let ts = timesteps(sched.len(), cfg.steps);
    for (k, &t) in ts.iter().enumerate() {
        let prev = ts.get(k + 1).copied();
        let ab = sched.alpha_bars[t];
        let ab_prev = prev.map_or(1.0, |p| sched.alpha_bars[p]);
        let eps = model.predict(&x, &vec![t; n], &cond)?.detach();
        let x0 = ((&x - (&eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
        let (mean, sigma) = match cfg.kind {
            SamplerKind::Ddim => {
                let sigma = cfg.eta * ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).max(0.0).sqrt();
                let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
                (((&x0 * ab_prev.sqrt())? + (&eps * dir)?)?, sigma)
            }
            SamplerKind::Ddpm => {
                // Posterior q(x_prev | x_t, x0) with the effective step alpha ab/ab_prev.
                let alpha = ab / ab_prev;
                let beta = 1.0 - alpha;
                let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
                let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
                let var = beta * (1.0 - ab_prev) / (1.0 - ab);
                (((&x0 * c0)? + (&x * ct)?)?, var.max(0.0).sqrt())
            }
        };
        x = if sigma > 0.0 && prev.is_some() {
            let noise: Vec<f32> = seeds.iter().flat_map(|s| randn_latent(seed::derive(*s, &[t as u64 + 1]), dims)).collect();
            let noise = Tensor::from_vec(noise, shape, &Device::Cpu)?.to_dtype(dtype)?;
            (mean + (noise * sigma)?)?
        } else {
            mean
        };
    }
    let out = Latent::unbatch(&x.to_dtype(DType::F32)?)?;
    if out.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numeric("sampler produced non-finite latents".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_schedule() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bars[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars[1] - 0.72).abs() < 1e-15);
        assert!(make_schedule(2, 0.1, 0.1).is_err());
        assert!(make_schedule(1, 0.1, 0.2).is_err());
        assert!(make_schedule(4, 0.0, 0.2).is_err());
    }

    #[test]
    fn default_schedule_invariants() {
        let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        assert_eq!(s.len(), 256);
        assert!(s.alpha_bars[0] >= 0.99);
        assert!(s.betas.windows(2).all(|w| w[0] < w[1]));
        assert!(s.alpha_bars.windows(2).all(|w| w[0] > w[1] && w[1] > 0.0));
    }

    #[test]
    fn q_sample_endpoints() {
        let z = Latent::new(1, 2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let e = Latent::new(1, 2, 2, vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        assert_eq!(q_sample_with(&z, 1.0, &e).unwrap(), z);
        assert_eq!(q_sample_with(&z, 0.0, &e).unwrap(), e);
        let bad = Latent::new(1, 1, 4, vec![0.0; 4]).unwrap();
        assert!(q_sample_with(&z, 0.5, &bad).is_err());
        let s = make_schedule(4, 0.1, 0.2).unwrap();
        assert!(q_sample(&z, 4, &e, &s).is_err());
    }

    #[test]
    fn timestep_grid() {
        assert_eq!(timesteps(10, 5), vec![8, 6, 4, 2, 0]);
        assert_eq!(timesteps(4, 4), vec![3, 2, 1, 0]);
        assert_eq!(timesteps(256, 1), vec![0]);
    }

    #[test]
    fn sampler_config_checks() {
        let s = make_schedule(8, 0.1, 0.2).unwrap();
        assert!(SamplerConfig { steps: 9, ..Default::default() }.validate(&s).is_err());
        assert!(SamplerConfig { steps: 4, eta: 1.5, ..Default::default() }.validate(&s).is_err());
        assert!(SamplerConfig { steps: 8, ..Default::default() }.validate(&s).is_ok());
    }
}
