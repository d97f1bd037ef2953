//! The experiment configuration: one TOML file with a section per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::diffusion::{NoiseSchedule, SamplerConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::evalkit::features::FeatureNetSpec;
use crate::scenegen::DatasetConfig;
use crate::unet::UNetConfig;

/// Snapshot file written first into every output directory.
pub const SNAPSHOT_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct DiffusionConfig {
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Source samples per micro-batch; each carries all of its targets.
    pub batch_size: usize,
    /// Micro-batches averaged into one optimizer update.
    pub accum: usize,
    pub epochs: usize,
    /// Optional cap on optimizer updates.
    pub max_steps: Option<usize>,
    pub learning_rate: f64,
    /// Linear warm-up length in optimizer updates.
    pub warmup_steps: usize,
    pub seed: u64,
    /// Write `checkpoints/epoch_NNNN.ckpt` every this many epochs (0 = final only).
    pub checkpoint_every: usize,
    /// Probability of replacing a target's skeleton latent by zeros.
    pub cond_dropout: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            accum: 2,
            epochs: 10,
            max_steps: None,
            learning_rate: 1e-4,
            warmup_steps: 0,
            seed: 0,
            checkpoint_every: 1,
            cond_dropout: 0.0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.accum == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size, accum and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config("cond_dropout must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub features: FeatureNetSpec,
    pub psnr_cap: f64,
    pub bins: usize,
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            features: FeatureNetSpec::default(),
            psnr_cap: crate::evalkit::PSNR_CAP,
            bins: crate::evalkit::analysis::DEFAULT_BINS,
            bootstrap: crate::evalkit::stats::DEFAULT_BOOTSTRAP,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenegen: DatasetConfig,
    pub codec: CodecConfig,
    pub unet: UNetConfig,
    pub diffusion: DiffusionConfig,
    pub training: TrainingConfig,
    pub evaluation: EvaluationConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Overrides every stage seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scenegen.seed = seed;
        self.codec.seed = seed;
        self.training.seed = seed;
        self.diffusion.sampler.seed = seed;
        self.evaluation.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.scenegen.validate()?;
        self.codec.validate()?;
        self.unet.validate()?;
        self.training.validate()?;
        let sched = NoiseSchedule::from_config(&self.diffusion.schedule)?;
        self.diffusion.sampler.validate(&sched)?;
        if self.codec.resolution != self.scenegen.resolution {
            return Err(Error::Config(format!(
                "codec resolution {} differs from dataset resolution {}",
                self.codec.resolution, self.scenegen.resolution
            )));
        }
        if self.unet.latent_channels != self.codec.latent_channels || self.unet.global_dim != self.codec.global_dim {
            return Err(Error::Config("unet latent_channels/global_dim must match the codec".into()));
        }
        let (_, h, _) = self.codec.latent_dims();
        if h % self.unet.downsample_factor() != 0 {
            return Err(Error::Config(format!("latent side {h} not divisible by the unet depth")));
        }
        if self.evaluation.bins == 0 || self.evaluation.bootstrap < 2 || !(self.evaluation.psnr_cap > 0.0) {
            return Err(Error::Config("evaluation bins, bootstrap and psnr_cap must be positive".into()));
        }
        Ok(())
    }

    /// Writes the snapshot into `dir`, creating it.
    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(SNAPSHOT_FILE);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))
    }
}
