//! The conditional denoiser: a small UNet whose normalization sites are
//! modulated by skeleton latents and, optionally, camera rays.

pub mod model;
pub mod norm;
pub mod rays;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use model::{Conditioning, UNet};
pub use norm::{group_normalize, modulate, scn_modulate, ModulationMlp, NormSite};
pub use rays::{ray_map, ray_tensor, RAY_CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "scn")]
    Scn,
    #[serde(rename = "scn+rcn")]
    ScnRcn,
    #[serde(rename = "rcn")]
    Rcn,
}

impl Mode {
    pub fn uses_skeleton(self) -> bool {
        matches!(self, Mode::Scn | Mode::ScnRcn)
    }

    pub fn uses_rays(self) -> bool {
        matches!(self, Mode::Rcn | Mode::ScnRcn)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Scn => "scn",
            Mode::ScnRcn => "scn+rcn",
            Mode::Rcn => "rcn",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "scn" => Ok(Mode::Scn),
            "scn+rcn" => Ok(Mode::ScnRcn),
            "rcn" => Ok(Mode::Rcn),
            _ => Err(Error::Config(format!("unknown unet mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub mode: Mode,
    /// Channels of the diffused latent (the source latent adds as many again).
    pub latent_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub groups: usize,
    pub eps: f64,
    /// Hidden width of each modulation MLP as a multiple of the site's channels.
    pub mlp_hidden_mult: usize,
    /// Levels (0 = full latent resolution) that get self- and cross-attention.
    pub attention_levels: Vec<usize>,
    pub global_dim: usize,
    /// Number of key/value tokens the global embedding is projected into.
    pub global_tokens: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Scn,
            latent_channels: 4,
            base_channels: 64,
            channel_mults: vec![1, 2, 2],
            groups: 8,
            eps: 1e-5,
            mlp_hidden_mult: 4,
            attention_levels: vec![2],
            global_dim: 128,
            global_tokens: 4,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.base_channels == 0 || self.channel_mults.is_empty() {
            return Err(Error::Config("unet channels and levels must be non-zero".into()));
        }
        if self.groups == 0 || !(self.eps > 0.0) || self.global_dim == 0 || self.global_tokens == 0 {
            return Err(Error::Config("unet groups, eps and global embedding sizes must be positive".into()));
        }
        for c in self.level_channels() {
            if c % self.groups != 0 {
                return Err(Error::Config(format!("{} groups do not divide level width {c}", self.groups)));
            }
        }
        if let Some(l) = self.attention_levels.iter().find(|l| **l >= self.channel_mults.len()) {
            return Err(Error::Config(format!("attention level {l} beyond {} levels", self.channel_mults.len())));
        }
        Ok(())
    }

    pub fn level_channels(&self) -> Vec<usize> {
        self.channel_mults.iter().map(|m| m * self.base_channels).collect()
    }

    /// Latent sides must be divisible by this.
    pub fn downsample_factor(&self) -> usize {
        1 << (self.channel_mults.len() - 1)
    }

    pub fn time_dim(&self) -> usize {
        4 * self.base_channels
    }
}
