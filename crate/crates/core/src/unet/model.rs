use candle_core::{DType, Device, Tensor, D};

use super::norm::{NormSite, SiteInputs};
use super::rays::ray_tensor;
use super::{Mode, UNetConfig};
use crate::error::{Error, Result};
use crate::nn::{upsample2x, Conv2d, Linear, ParamStore};
use crate::scenegen::CameraPose;

/// Everything except the noisy latent and timestep that a target sees.
/// All tensors have one row per target.
#[derive(Debug, Clone)]
pub struct Conditioning {
    /// `(N, c, h, w)`; the source latent repeated per target.
    pub z_src: Tensor,
    /// `(N, c, h, w)` skeleton latents.
    pub skeleton: Tensor,
    /// `(N, e)` global embeddings of the source.
    pub global: Tensor,
    /// Target cameras; required by ray-conditioned modes.
    pub cameras: Option<Vec<CameraPose>>,
}

struct ResBlock {
    norm1: NormSite,
    conv1: Conv2d,
    time: Linear,
    norm2: NormSite,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, cfg: &UNetConfig) -> Result<Self> {
        Ok(Self {
            norm1: NormSite::new(ps, &format!("{name}.norm1"), cin, cfg)?,
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), cin, cout, 3, 1)?,
            time: Linear::new(ps, &format!("{name}.time"), cfg.time_dim(), cout)?,
            norm2: NormSite::new(ps, &format!("{name}.norm2"), cout, cfg)?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), cout, cout, 3, 1)?,
            skip: if cin != cout { Some(Conv2d::new(ps, &format!("{name}.skip"), cin, cout, 1, 1)?) } else { None },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor, site: &SiteInputs) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x, site)?.silu()?)?;
        let t = self.time.forward(temb)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h, site)?.silu()?)?;
        let skip = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

fn attend(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let scale = 1.0 / (q.dim(D::Minus1)? as f64).sqrt();
    let w = softmax_last(&(q.matmul(&k.t()?.contiguous()?)? * scale)?)?;
    Ok(w.matmul(v)?)
}

/// Self-attention over positions followed by cross-attention to the global
/// embedding tokens, both residual.
struct AttnBlock {
    norm: NormSite,
    qkv: Linear,
    proj: Linear,
    cross_norm: NormSite,
    cross_q: Linear,
    cross_kv: Linear,
    cross_proj: Linear,
    tokens: Linear,
    n_tokens: usize,
    channels: usize,
}

impl AttnBlock {
    fn new(ps: &mut ParamStore, name: &str, c: usize, cfg: &UNetConfig) -> Result<Self> {
        Ok(Self {
            norm: NormSite::new(ps, &format!("{name}.norm"), c, cfg)?,
            qkv: Linear::new(ps, &format!("{name}.qkv"), c, 3 * c)?,
            proj: Linear::new(ps, &format!("{name}.proj"), c, c)?,
            cross_norm: NormSite::new(ps, &format!("{name}.cross_norm"), c, cfg)?,
            cross_q: Linear::new(ps, &format!("{name}.cross_q"), c, c)?,
            cross_kv: Linear::new(ps, &format!("{name}.cross_kv"), c, 2 * c)?,
            cross_proj: Linear::new(ps, &format!("{name}.cross_proj"), c, c)?,
            tokens: Linear::new(ps, &format!("{name}.tokens"), cfg.global_dim, cfg.global_tokens * c)?,
            n_tokens: cfg.global_tokens,
            channels: c,
        })
    }

    /// `(B, C, H, W)` → `(B, HW, C)`.
    fn to_tokens(x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
    }

    fn from_tokens(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (b, _, c) = t.dims3()?;
        Ok(t.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
    }

    fn forward(&self, x: &Tensor, global: &Tensor, site: &SiteInputs) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let t = Self::to_tokens(&self.norm.forward(x, site)?)?;
        let qkv = self.qkv.forward(&t)?;
        let q = qkv.narrow(2, 0, c)?.contiguous()?;
        let k = qkv.narrow(2, c, c)?.contiguous()?;
        let v = qkv.narrow(2, 2 * c, c)?.contiguous()?;
        let a = self.proj.forward(&attend(&q, &k, &v)?)?;
        let x = (x + Self::from_tokens(&a, h, w)?)?;

        let q = self.cross_q.forward(&Self::to_tokens(&self.cross_norm.forward(&x, site)?)?)?;
        let ctx = self.tokens.forward(global)?.reshape((b, self.n_tokens, self.channels))?;
        let kv = self.cross_kv.forward(&ctx)?;
        let k = kv.narrow(2, 0, c)?.contiguous()?;
        let v = kv.narrow(2, c, c)?.contiguous()?;
        let a = self.cross_proj.forward(&attend(&q, &k, &v)?)?;
        Ok((x + Self::from_tokens(&a, h, w)?)?)
    }
}

struct DownLevel {
    block: ResBlock,
    attn: Option<AttnBlock>,
    down: Option<Conv2d>,
}

struct UpLevel {
    block: ResBlock,
    attn: Option<AttnBlock>,
    up: Option<Conv2d>,
}

/// The denoiser `ε_θ(z_t, t, s, z_src, g)`.
pub struct UNet {
    cfg: UNetConfig,
    dtype: DType,
    conv_in: Conv2d,
    time1: Linear,
    time2: Linear,
    down: Vec<DownLevel>,
    mid1: ResBlock,
    mid_attn: AttnBlock,
    mid2: ResBlock,
    up: Vec<UpLevel>,
    norm_out: NormSite,
    conv_out: Conv2d,
}

/// Sinusoidal embedding of integer timesteps, `(N, dim)`.
pub fn timestep_embedding(t: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        for i in 0..dim {
            let k = i % half.max(1);
            let freq = (-(10000f64.ln()) * k as f64 / half.max(1) as f64).exp();
            let arg = step as f64 * freq;
            data.push(if i < half { arg.sin() } else { arg.cos() });
        }
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

impl UNet {
    /// Builds the network, creating any parameters missing from `ps`.
    pub fn new(ps: &mut ParamStore, cfg: &UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let chans = cfg.level_channels();
        let levels = chans.len();
        let c = cfg.latent_channels;
        let td = cfg.time_dim();
        let conv_in = Conv2d::new(ps, "conv_in", 2 * c, chans[0], 3, 1)?;
        let time1 = Linear::new(ps, "time.0", cfg.base_channels, td)?;
        let time2 = Linear::new(ps, "time.1", td, td)?;
        let mut down = Vec::new();
        let mut cin = chans[0];
        for (i, &ch) in chans.iter().enumerate() {
            let name = format!("down.{i}");
            down.push(DownLevel {
                block: ResBlock::new(ps, &format!("{name}.res"), cin, ch, cfg)?,
                attn: if cfg.attention_levels.contains(&i) {
                    Some(AttnBlock::new(ps, &format!("{name}.attn"), ch, cfg)?)
                } else {
                    None
                },
                down: if i + 1 < levels { Some(Conv2d::new(ps, &format!("{name}.down"), ch, ch, 3, 2)?) } else { None },
            });
            cin = ch;
        }
        let cm = chans[levels - 1];
        let mid1 = ResBlock::new(ps, "mid.res1", cm, cm, cfg)?;
        let mid_attn = AttnBlock::new(ps, "mid.attn", cm, cfg)?;
        let mid2 = ResBlock::new(ps, "mid.res2", cm, cm, cfg)?;
        let mut up = Vec::new();
        let mut cin = cm;
        for i in (0..levels).rev() {
            let ch = chans[i];
            let name = format!("up.{i}");
            let out_ch = if i > 0 { chans[i - 1] } else { ch };
            up.push(UpLevel {
                block: ResBlock::new(ps, &format!("{name}.res"), cin + ch, ch, cfg)?,
                attn: if cfg.attention_levels.contains(&i) {
                    Some(AttnBlock::new(ps, &format!("{name}.attn"), ch, cfg)?)
                } else {
                    None
                },
                up: if i > 0 { Some(Conv2d::new(ps, &format!("{name}.up"), ch, out_ch, 3, 1)?) } else { None },
            });
            cin = out_ch;
        }
        let norm_out = NormSite::new(ps, "norm_out", chans[0], cfg)?;
        let conv_out = Conv2d::new(ps, "conv_out", chans[0], c, 3, 1)?;
        Ok(Self {
            cfg: cfg.clone(),
            dtype: ps.dtype(),
            conv_in,
            time1,
            time2,
            down,
            mid1,
            mid_attn,
            mid2,
            up,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn mode(&self) -> Mode {
        self.cfg.mode
    }

    /// Predicted noise for each target, same shape as `z_t`.
    pub fn forward(&self, z_t: &Tensor, t: &[usize], cond: &Conditioning) -> Result<Tensor> {
        let (n, c, h, w) = z_t.dims4()?;
        if c != self.cfg.latent_channels {
            return Err(Error::shape(format!("{} latent channels", self.cfg.latent_channels), c));
        }
        if cond.z_src.dims() != z_t.dims() {
            return Err(Error::shape(format!("{:?}", z_t.dims()), format!("{:?}", cond.z_src.dims())));
        }
        if t.len() != n || cond.global.dim(0)? != n {
            return Err(Error::Input(format!("{n} targets but {} timesteps / {} global rows", t.len(), cond.global.dim(0)?)));
        }
        let f = self.cfg.downsample_factor();
        if h % f != 0 || w % f != 0 {
            return Err(Error::Input(format!("latent {h}x{w} not divisible by {f}")));
        }
        let levels = self.cfg.channel_mults.len();

        let mut skel = Vec::with_capacity(levels);
        if self.cfg.mode.uses_skeleton() {
            if cond.skeleton.dims() != z_t.dims() {
                return Err(Error::shape(format!("{:?}", z_t.dims()), format!("{:?}", cond.skeleton.dims())));
            }
            let mut s = cond.skeleton.clone();
            for i in 0..levels {
                if i > 0 {
                    s = s.avg_pool2d(2)?;
                }
                skel.push(Some(s.clone()));
            }
        } else {
            skel.resize(levels, None);
        }
        let mut rays = Vec::with_capacity(levels);
        if self.cfg.mode.uses_rays() {
            let cams = cond
                .cameras
                .as_ref()
                .ok_or_else(|| Error::Config(format!("mode {} requires target cameras", self.cfg.mode.name())))?;
            if cams.len() != n {
                return Err(Error::Input(format!("{n} targets but {} cameras", cams.len())));
            }
            for i in 0..levels {
                rays.push(Some(ray_tensor(cams, h >> i, w >> i, self.dtype)?));
            }
        } else {
            rays.resize(levels, None);
        }
        let sites: Vec<SiteInputs> =
            (0..levels).map(|i| SiteInputs { skeleton: skel[i].as_ref(), rays: rays[i].as_ref() }).collect();

        let temb = timestep_embedding(t, self.cfg.base_channels, self.dtype)?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?.silu()?;

        let mut x = self.conv_in.forward(&Tensor::cat(&[z_t, &cond.z_src], 1)?)?;
        let mut skips = Vec::with_capacity(levels);
        for (i, lvl) in self.down.iter().enumerate() {
            x = lvl.block.forward(&x, &temb, &sites[i])?;
            if let Some(a) = &lvl.attn {
                x = a.forward(&x, &cond.global, &sites[i])?;
            }
            skips.push(x.clone());
            if let Some(d) = &lvl.down {
                x = d.forward(&x)?;
            }
        }
        let low = &sites[levels - 1];
        x = self.mid1.forward(&x, &temb, low)?;
        x = self.mid_attn.forward(&x, &cond.global, low)?;
        x = self.mid2.forward(&x, &temb, low)?;
        for (k, lvl) in self.up.iter().enumerate() {
            let i = levels - 1 - k;
            let skip = skips.pop().expect("one skip per level");
            x = lvl.block.forward(&Tensor::cat(&[&x, &skip], 1)?, &temb, &sites[i])?;
            if let Some(a) = &lvl.attn {
                x = a.forward(&x, &cond.global, &sites[i])?;
            }
            if let Some(u) = &lvl.up {
                x = u.forward(&upsample2x(&x)?)?;
            }
        }
        let x = self.norm_out.forward(&x, &sites[0])?.silu()?;
        self.conv_out.forward(&x)
    }
}
