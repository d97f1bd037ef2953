//! The denoiser checkpoint: UNet parameters, optimizer state and enough
//! metadata to rebuild the network, its schedule and its codec.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::codec::Codec;
use crate::diffusion::{NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore};
use crate::unet::{UNet, UNetConfig};

const KIND: &str = "denoiser";
const ADAM_PREFIX: &str = "adam.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecRef {
    /// As given at training time; resolved against the checkpoint directory if relative.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub epochs_completed: usize,
    pub steps: usize,
    pub seed: u64,
    pub last_loss: f64,
    pub warm_start: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserMeta {
    pub kind: String,
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
    pub codec: CodecRef,
    pub training: TrainingState,
}

pub struct Denoiser {
    pub params: ParamStore,
    pub net: UNet,
    pub meta: DenoiserMeta,
}

impl Denoiser {
    /// Fresh network, or one completed from `params` (missing tensors are initialized).
    pub fn build(mut params: ParamStore, meta: DenoiserMeta) -> Result<Self> {
        let net = UNet::new(&mut params, &meta.unet)?;
        Ok(Self { params, net, meta })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_config(&self.meta.schedule)
    }

    pub fn save(&self, path: &Path, adam: Option<&Adam>) -> Result<()> {
        let mut tensors = self.params.tensors();
        if let Some(a) = adam {
            tensors.extend(a.state_tensors());
        }
        checkpoint::save(path, &self.meta, &tensors)
    }

    /// Loads parameters and returns the optimizer tensors separately.
    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, Tensor>)> {
        let loaded = checkpoint::load::<DenoiserMeta>(path)?;
        if loaded.meta.kind != KIND {
            return Err(Error::Data(format!("{} is not a denoiser checkpoint", path.display())));
        }
        let (adam, params): (BTreeMap<_, _>, BTreeMap<_, _>) =
            loaded.tensors.into_iter().partition(|(k, _)| k.starts_with(ADAM_PREFIX));
        let mut ps = ParamStore::new(DType::F32, loaded.meta.training.seed);
        for (k, t) in &params {
            ps.insert(k, t)?;
        }
        let n = ps.num_params();
        let den = Self::build(ps, loaded.meta)?;
        if den.params.num_params() != n {
            return Err(Error::Data(format!("{}: parameters do not match the stored unet config", path.display())));
        }
        Ok((den, adam))
    }

    /// Loads the referenced codec and checks its digest.
    pub fn load_codec(&self, checkpoint_path: &Path) -> Result<Codec> {
        let path = resolve_codec(&self.meta.codec.path, checkpoint_path);
        let digest = checkpoint::file_digest(&path)?;
        if digest != self.meta.codec.sha256 {
            return Err(Error::Data(format!("codec {} does not match the digest stored in the denoiser", path.display())));
        }
        Codec::load(&path)
    }
}

pub fn new_meta(unet: UNetConfig, schedule: ScheduleConfig, codec: CodecRef, seed: u64) -> DenoiserMeta {
    DenoiserMeta {
        kind: KIND.into(),
        unet,
        schedule,
        codec,
        training: TrainingState { epochs_completed: 0, steps: 0, seed, last_loss: f64::NAN, warm_start: None },
    }
}

fn resolve_codec(stored: &str, checkpoint_path: &Path) -> PathBuf {
    let p = PathBuf::from(stored);
    if p.is_absolute() || p.exists() {
        return p;
    }
    checkpoint_path.parent().map(|d| d.join(&p)).unwrap_or(p)
}

pub fn codec_ref(path: &Path) -> Result<CodecRef> {
    Ok(CodecRef { path: path.to_string_lossy().into_owned(), sha256: checkpoint::file_digest(path)? })
}
