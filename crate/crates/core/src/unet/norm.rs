//! Group normalization and the skeleton/ray conditioned modulation applied
//! after it.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};

/// `(F − μ) / sqrt(σ² + eps)` with statistics over each group of `C/G`
/// channels and all spatial positions. `x` is `(B, C, H, W)`.
pub fn group_normalize(x: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::Config(format!("{groups} groups do not divide {c} channels")));
    }
    let g = x.reshape((b, groups, (c / groups) * h * w))?;
    let mean = g.mean_keepdim(D::Minus1)?;
    let centered = g.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let out = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(out.reshape((b, c, h, w))?)
}

/// `normalized · (1 + γ) + β`.
pub fn modulate(normalized: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    Ok(normalized.broadcast_mul(&(gamma + 1.0)?)?.broadcast_add(beta)?)
}

/// Position-shared two-layer MLP (1×1 convolutions) mapping conditioning
/// features to per-pixel `(γ, β)`. The last layer starts at zero so a fresh
/// branch is an exact identity on the normalized activations.
#[derive(Debug, Clone)]
pub struct ModulationMlp {
    hidden: Conv2d,
    out: Conv2d,
    channels: usize,
    in_channels: usize,
}

impl ModulationMlp {
    pub fn new(ps: &mut ParamStore, name: &str, in_channels: usize, channels: usize, hidden_mult: usize) -> Result<Self> {
        let hid = hidden_mult.max(1) * channels;
        Ok(Self {
            hidden: Conv2d::new(ps, &format!("{name}.hidden"), in_channels, hid, 1, 1)?,
            out: Conv2d::zeroed(ps, &format!("{name}.out"), hid, 2 * channels, 1)?,
            channels,
            in_channels,
        })
    }

    /// `(γ, β)`, each `(B, C, h, w)`, from features `s` of shape `(B, C_s, h, w)`.
    pub fn forward(&self, s: &Tensor) -> Result<(Tensor, Tensor)> {
        let cs = s.dim(1)?;
        if cs != self.in_channels {
            return Err(Error::shape(format!("{} conditioning channels", self.in_channels), format!("{cs}")));
        }
        let y = self.out.forward(&self.hidden.forward(s)?.silu()?)?;
        let gamma = y.narrow(1, 0, self.channels)?;
        let beta = y.narrow(1, self.channels, self.channels)?;
        Ok((gamma, beta))
    }
}

/// Group norm followed by skeleton modulation: `GN(F)·(1+γ)+β`, `(γ,β) = MLP(s)`.
pub fn scn_modulate(x: &Tensor, s: &Tensor, mlp: &ModulationMlp, groups: usize, eps: f64) -> Result<Tensor> {
    let n = group_normalize(x, groups, eps)?;
    let (gamma, beta) = mlp.forward(s)?;
    modulate(&n, &gamma, &beta)
}

/// Per-level conditioning features handed to every normalization site.
#[derive(Debug, Clone, Default)]
pub struct SiteInputs<'a> {
    pub skeleton: Option<&'a Tensor>,
    pub rays: Option<&'a Tensor>,
}

/// One normalization site: group norm, then (if present) ray modulation,
/// then (if present) skeleton modulation of the result.
#[derive(Debug, Clone)]
pub struct NormSite {
    groups: usize,
    eps: f64,
    rcn: Option<ModulationMlp>,
    scn: Option<ModulationMlp>,
}

impl NormSite {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, cfg: &super::UNetConfig) -> Result<Self> {
        if !channels.is_multiple_of(cfg.groups) {
            return Err(Error::Config(format!("{} groups do not divide {channels} channels at {name}", cfg.groups)));
        }
        let rcn = if cfg.mode.uses_rays() {
            Some(ModulationMlp::new(ps, &format!("{name}.rcn"), super::rays::RAY_CHANNELS, channels, cfg.mlp_hidden_mult)?)
        } else {
            None
        };
        let scn = if cfg.mode.uses_skeleton() {
            Some(ModulationMlp::new(ps, &format!("{name}.scn"), cfg.latent_channels, channels, cfg.mlp_hidden_mult)?)
        } else {
            None
        };
        Ok(Self { groups: cfg.groups, eps: cfg.eps, rcn, scn })
    }

    pub fn forward(&self, x: &Tensor, inputs: &SiteInputs) -> Result<Tensor> {
        let mut h = group_normalize(x, self.groups, self.eps)?;
        if let Some(mlp) = &self.rcn {
            let rays = inputs.rays.ok_or_else(|| Error::Config("ray conditioning requires target cameras".into()))?;
            let (g, b) = mlp.forward(rays)?;
            h = modulate(&h, &g, &b)?;
        }
        if let Some(mlp) = &self.scn {
            let s = inputs.skeleton.ok_or_else(|| Error::Config("skeleton conditioning requires skeleton latents".into()))?;
            let (g, b) = mlp.forward(s)?;
            h = modulate(&h, &g, &b)?;
        }
        Ok(h)
    }
}
