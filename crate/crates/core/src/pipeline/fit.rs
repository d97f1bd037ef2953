//! The optimization loop over encoded samples, with no file I/O.
//!
//! All randomness is keyed statelessly: the sample order by `(seed, epoch)`
//! and each target's timestep and noise by `(seed, step, position)`. A resumed
//! run therefore replays exactly what an uninterrupted one would have done.

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::encode::EncodedSample;
use crate::codec::{Latent, SkeletonEmbedding};
use crate::config::TrainingConfig;
use crate::diffusion::{per_target_loss, training_loss, DiffusionBatch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{accumulate, gradients, scale_all, Adam, ParamStore};
use crate::seed;
use crate::unet::UNet;

const STREAM_ORDER: u64 = 0x0bde;
const STREAM_NOISE: u64 = 0x9015e;
const STREAM_PROBE: u64 = 0x960be;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

/// Draws timesteps and noise for every target of `sample` from one keyed stream.
pub fn noised_batch(sample: &EncodedSample, key: u64, total_steps: usize, cond_dropout: f64) -> Result<DiffusionBatch> {
    let mut rng = seed::rng(key, &[]);
    let (c, h, w) = sample.z_src.dims();
    let mut t = Vec::new();
    let mut eps = Vec::new();
    let mut skeletons = Vec::new();
    for tgt in &sample.targets {
        t.push(rng.gen_range(0..total_steps));
        let e: Vec<f32> = (0..c * h * w).map(|_| StandardNormal.sample(&mut rng)).collect();
        eps.push(Latent::new(c, h, w, e)?);
        let drop = cond_dropout > 0.0 && rng.gen::<f64>() < cond_dropout;
        skeletons.push(if drop { SkeletonEmbedding(Latent::new(c, h, w, vec![0.0; c * h * w])?) } else { tgt.skeleton.clone() });
    }
    Ok(DiffusionBatch {
        z_src: sample.z_src.clone(),
        z_tgt: sample.targets.iter().map(|t| t.z.clone()).collect(),
        skeletons,
        global: sample.global.clone(),
        t,
        eps,
        cameras: sample.targets.iter().map(|t| t.camera).collect(),
    })
}

pub fn updates_per_epoch(samples: usize, cfg: &TrainingConfig) -> usize {
    samples.div_ceil(cfg.batch_size * cfg.accum)
}

pub fn epoch_order(samples: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..samples).collect();
    order.shuffle(&mut seed::rng(seed, &[STREAM_ORDER, epoch as u64]));
    order
}

fn learning_rate(cfg: &TrainingConfig, step: usize) -> f64 {
    if cfg.warmup_steps == 0 {
        cfg.learning_rate
    } else {
        cfg.learning_rate * ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
    }
}

/// Optimizer plus position in the run.
pub struct Fit<'a> {
    pub net: &'a UNet,
    pub params: &'a ParamStore,
    pub sched: &'a NoiseSchedule,
    pub cfg: &'a TrainingConfig,
    pub adam: Adam,
    /// Epochs fully completed.
    pub epoch: usize,
    /// Optimizer updates applied.
    pub step: usize,
}

impl<'a> Fit<'a> {
    pub fn new(net: &'a UNet, params: &'a ParamStore, sched: &'a NoiseSchedule, cfg: &'a TrainingConfig) -> Self {
        Self { net, params, sched, cfg, adam: Adam::new(cfg.learning_rate), epoch: 0, step: 0 }
    }

    pub fn done(&self) -> bool {
        self.epoch >= self.cfg.epochs || self.cfg.max_steps.is_some_and(|m| self.step >= m)
    }

    /// One optimizer update from the samples at `positions` of the current order.
    fn update(&mut self, samples: &[EncodedSample], order: &[usize], positions: std::ops::Range<usize>) -> Result<f64> {
        let cfg = self.cfg;
        let micro: Vec<Vec<DiffusionBatch>> = positions
            .clone()
            .collect::<Vec<_>>()
            .chunks(cfg.batch_size)
            .map(|chunk| {
                chunk
                    .iter()
                    .map(|&pos| {
                        let key = seed::derive(cfg.seed, &[STREAM_NOISE, self.step as u64, pos as u64]);
                        noised_batch(&samples[order[pos]], key, self.sched.len(), cfg.cond_dropout)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let total: usize = micro.iter().flatten().map(|b| b.len()).sum();
        let mut grads = std::collections::BTreeMap::new();
        let mut loss_sum = 0.0;
        for batches in &micro {
            let weight = batches.iter().map(|b| b.len()).sum::<usize>() as f64 / total as f64;
            let loss = training_loss(batches, self.net, self.sched)?;
            let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at step {}", self.step)));
            }
            loss_sum += weight * value;
            let mut g = gradients(self.params, &loss)?;
            scale_all(&mut g, weight)?;
            accumulate(&mut grads, g)?;
        }
        self.adam.lr = learning_rate(cfg, self.step);
        self.adam.apply(self.params, &grads)?;
        self.step += 1;
        Ok(loss_sum)
    }

    /// Runs the next epoch, stopping early at `max_steps`.
    pub fn run_epoch(&mut self, samples: &[EncodedSample], on_step: &mut dyn FnMut(StepRecord) -> Result<()>) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::Data("no training samples".into()));
        }
        let order = epoch_order(samples.len(), self.cfg.seed, self.epoch);
        let per_update = self.cfg.batch_size * self.cfg.accum;
        let mut start = 0;
        while start < samples.len() {
            if self.cfg.max_steps.is_some_and(|m| self.step >= m) {
                break;
            }
            let end = (start + per_update).min(samples.len());
            let loss = self.update(samples, &order, start..end)?;
            on_step(StepRecord { step: self.step, epoch: self.epoch, loss })?;
            start = end;
        }
        self.epoch += 1;
        Ok(())
    }
}

/// Loss with timesteps and noise fixed by `seed`: comparable across training.
pub fn probe_loss(samples: &[EncodedSample], net: &UNet, sched: &NoiseSchedule, seed: u64, chunk: usize) -> Result<f64> {
    let batches = samples
        .iter()
        .enumerate()
        .map(|(i, s)| noised_batch(s, seed::derive(seed, &[STREAM_PROBE, i as u64]), sched.len(), 0.0))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for group in batches.chunks(chunk.max(1)) {
        let per: Tensor = per_target_loss(group, net, sched)?;
        let v: Vec<f64> = per.to_dtype(candle_core::DType::F64)?.to_vec1()?;
        sum += v.iter().sum::<f64>();
        count += v.len();
    }
    Ok(sum / count as f64)
}
