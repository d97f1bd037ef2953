//! Convolutional autoencoder: the latent space for diffusion, the skeleton
//! encoder, and a pooled global image embedding.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{gradients, upsample2x, Adam, Conv2d, Init, ParamStore};
use crate::scenegen::dataset::{DatasetManifest, Split};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentMode {
    Learned,
    /// Pass-through codec with `d = 1`, `c = 3`.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub latent_mode: LatentMode,
    pub resolution: usize,
    pub latent_channels: usize,
    /// Spatial downsample factor; a power of two.
    pub downsample: usize,
    /// Channel width at each resolution, from full resolution down to latent.
    pub widths: Vec<usize>,
    pub global_dim: usize,
    pub epochs: usize,
    /// Train on a seeded random subset of at most this many images.
    pub max_images: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            latent_mode: LatentMode::Learned,
            resolution: 64,
            latent_channels: 4,
            downsample: 4,
            widths: vec![16, 32, 64],
            global_dim: 128,
            epochs: 12,
            max_images: None,
            batch_size: 16,
            learning_rate: 2e-3,
            seed: 0,
        }
    }
}

impl CodecConfig {
    pub fn identity(resolution: usize) -> Self {
        Self { latent_mode: LatentMode::Identity, resolution, latent_channels: 3, downsample: 1, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self.latent_mode {
            LatentMode::Identity => {
                if self.downsample != 1 || self.latent_channels != 3 {
                    return bad("identity codec requires downsample = 1 and latent_channels = 3".into());
                }
            }
            LatentMode::Learned => {
                if !self.downsample.is_power_of_two() || self.downsample > 16 {
                    return bad(format!("downsample {} must be a power of two up to 16", self.downsample));
                }
                let stages = self.downsample.trailing_zeros() as usize;
                if self.widths.len() != stages + 1 || self.widths.contains(&0) {
                    return bad(format!("widths needs {} positive entries for downsample {}", stages + 1, self.downsample));
                }
                if self.batch_size == 0 || !(self.learning_rate > 0.0) || self.max_images == Some(0) {
                    return bad("batch_size, learning_rate and max_images must be positive".into());
                }
            }
        }
        if !self.resolution.is_multiple_of(self.downsample) || self.resolution < 16 {
            return bad(format!("resolution {} incompatible with downsample {}", self.resolution, self.downsample));
        }
        if self.latent_channels == 0 || self.global_dim == 0 {
            return bad("latent_channels and global_dim must be positive".into());
        }
        Ok(())
    }

    pub fn latent_dims(&self) -> (usize, usize, usize) {
        let s = self.resolution / self.downsample;
        (self.latent_channels, s, s)
    }
}

/// A `c×h×w` latent.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Latent {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(channels * height * width, data.len()));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), (self.channels, self.height, self.width), &Device::Cpu)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        Self::new(c, h, w, t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
    }

    /// Stacks latents into a `(n, c, h, w)` batch.
    pub fn batch(items: &[&Latent]) -> Result<Tensor> {
        let ts = items.iter().map(|l| l.to_tensor()).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&ts, 0)?)
    }

    pub fn unbatch(t: &Tensor) -> Result<Vec<Latent>> {
        let n = t.dim(0)?;
        (0..n).map(|i| Latent::from_tensor(&t.get(i)?)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Encoder features of a skeleton image, used directly as the conditioning signal.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonEmbedding(pub Latent);

/// Pooled, projected image code used as cross-attention context.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalEmbedding(pub Vec<f32>);

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CodecTraining {
    pub epochs: usize,
    pub steps: usize,
    pub images: usize,
    pub final_train_mse: f64,
    pub final_train_psnr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CodecMeta {
    kind: String,
    config: CodecConfig,
    latent_scale: f64,
    training: CodecTraining,
}

const GLOBAL_PROJ: &str = "global.proj";

pub struct Codec {
    config: CodecConfig,
    params: ParamStore,
    net: Option<Net>,
    global_proj: Tensor,
    latent_scale: f64,
    pub training: CodecTraining,
}

struct Net {
    enc_in: Conv2d,
    enc_down: Vec<(Conv2d, Conv2d)>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_mid: Conv2d,
    dec_up: Vec<(Conv2d, Conv2d)>,
    dec_out: Conv2d,
}

impl Net {
    fn build(ps: &mut ParamStore, cfg: &CodecConfig) -> Result<Self> {
        let w = &cfg.widths;
        let stages = w.len() - 1;
        let last = w[stages];
        let enc_in = Conv2d::new(ps, "enc.in", 3, w[0], 3, 1)?;
        let enc_down = (0..stages)
            .map(|s| {
                Ok((
                    Conv2d::new(ps, &format!("enc.down{s}.a"), w[s], w[s + 1], 3, 2)?,
                    Conv2d::new(ps, &format!("enc.down{s}.b"), w[s + 1], w[s + 1], 3, 1)?,
                ))
            })
            .collect::<Result<_>>()?;
        let enc_out = Conv2d::new(ps, "enc.out", last, cfg.latent_channels, 1, 1)?;
        let dec_in = Conv2d::new(ps, "dec.in", cfg.latent_channels, last, 3, 1)?;
        let dec_mid = Conv2d::new(ps, "dec.mid", last, last, 3, 1)?;
        let dec_up = (0..stages)
            .rev()
            .map(|s| {
                Ok((
                    Conv2d::new(ps, &format!("dec.up{s}.a"), w[s + 1], w[s], 3, 1)?,
                    Conv2d::new(ps, &format!("dec.up{s}.b"), w[s], w[s], 3, 1)?,
                ))
            })
            .collect::<Result<_>>()?;
        let dec_out = Conv2d::new(ps, "dec.out", w[0], 3, 3, 1)?;
        Ok(Self { enc_in, enc_down, enc_out, dec_in, dec_mid, dec_up, dec_out })
    }

    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let x = ((x * 2.0)? - 1.0)?;
        let mut h = self.enc_in.forward(&x)?.silu()?;
        for (a, b) in &self.enc_down {
            h = a.forward(&h)?.silu()?;
            h = (&h + b.forward(&h)?.silu()?)?;
        }
        self.enc_out.forward(&h)
    }

    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.dec_in.forward(z)?.silu()?;
        h = (&h + self.dec_mid.forward(&h)?.silu()?)?;
        for (a, b) in &self.dec_up {
            h = upsample2x(&h)?;
            h = a.forward(&h)?.silu()?;
            h = (&h + b.forward(&h)?.silu()?)?;
        }
        Ok(((self.dec_out.forward(&h)? + 1.0)? * 0.5)?)
    }
}

fn images_to_tensor(images: &[&Image]) -> Result<Tensor> {
    let ts = images
        .iter()
        .map(|img| {
            let (h, w) = img.dims();
            Ok(Tensor::from_slice(img.data(), (h, w, 3), &Device::Cpu)?.permute((2, 0, 1))?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

/// `(n, 3, h, w)` tensor → clamped images.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (n, _, h, w) = t.dims4()?;
    let hwc = t.to_dtype(DType::F32)?.permute((0, 2, 3, 1))?.contiguous()?;
    (0..n).map(|i| Image::from_vec_clamped(h, w, hwc.get(i)?.flatten_all()?.to_vec1()?)).collect()
}

impl Codec {
    /// An untrained codec (parameters at their seeded initial values).
    pub fn new(config: CodecConfig) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::new(DType::F32, config.seed);
        Self::assemble(config, params, 1.0, CodecTraining::default())
    }

    fn assemble(config: CodecConfig, mut params: ParamStore, latent_scale: f64, training: CodecTraining) -> Result<Self> {
        let net = match config.latent_mode {
            LatentMode::Learned => Some(Net::build(&mut params, &config)?),
            LatentMode::Identity => None,
        };
        let c = config.latent_channels;
        let global_proj = params.get(GLOBAL_PROJ, &[c, config.global_dim], Init::Normal(1.0 / (c as f64).sqrt()))?;
        Ok(Self { config, params, net, global_proj, latent_scale, training })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn latent_dims(&self) -> (usize, usize, usize) {
        self.config.latent_dims()
    }

    /// Multiplier applied to raw encoder outputs so latents have unit scale.
    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        let r = self.config.resolution;
        if img.dims() != (r, r) {
            return Err(Error::shape(format!("{r}x{r} image"), format!("{}x{} image", img.height(), img.width())));
        }
        Ok(())
    }

    /// `(n, 3, H, W)` → `(n, c, h, w)` scaled latents.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        match &self.net {
            None => Ok(x.clone()),
            Some(net) => Ok((net.encode(x)? * self.latent_scale)?),
        }
    }

    /// `(n, c, h, w)` → `(n, 3, H, W)` unclamped reconstruction.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        match &self.net {
            None => Ok(z.clone()),
            Some(net) => net.decode(&(z / self.latent_scale)?),
        }
    }

    pub fn encode(&self, img: &Image) -> Result<Latent> {
        Ok(self.encode_many(&[img])?.remove(0))
    }

    pub fn encode_many(&self, imgs: &[&Image]) -> Result<Vec<Latent>> {
        for img in imgs {
            self.check_image(img)?;
        }
        let mut out = Vec::with_capacity(imgs.len());
        for chunk in imgs.chunks(64) {
            out.extend(Latent::unbatch(&self.encode_tensor(&images_to_tensor(chunk)?)?)?);
        }
        Ok(out)
    }

    pub fn decode(&self, z: &Latent) -> Result<Image> {
        Ok(self.decode_many(&[z])?.remove(0))
    }

    pub fn decode_many(&self, zs: &[&Latent]) -> Result<Vec<Image>> {
        let dims = self.latent_dims();
        for z in zs {
            if z.dims() != dims {
                return Err(Error::shape(format!("{dims:?}"), format!("{:?}", z.dims())));
            }
        }
        let mut out = Vec::with_capacity(zs.len());
        for chunk in zs.chunks(64) {
            out.extend(tensor_to_images(&self.decode_tensor(&Latent::batch(chunk)?)?)?);
        }
        Ok(out)
    }

    pub fn embed_skeleton(&self, skeleton: &Image) -> Result<SkeletonEmbedding> {
        self.encode(skeleton).map(SkeletonEmbedding)
    }

    /// Spatial mean of the latent followed by the fixed projection to `global_dim`.
    pub fn embed_global(&self, img: &Image) -> Result<GlobalEmbedding> {
        self.global_from_latent(&self.encode(img)?)
    }

    pub fn global_from_latent(&self, z: &Latent) -> Result<GlobalEmbedding> {
        let pooled = z.to_tensor()?.mean((1, 2))?.unsqueeze(0)?;
        let g = pooled.matmul(&self.global_proj)?.squeeze(0)?;
        Ok(GlobalEmbedding(g.to_vec1()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CodecMeta {
            kind: "codec".into(),
            config: self.config.clone(),
            latent_scale: self.latent_scale,
            training: self.training.clone(),
        };
        checkpoint::save(path, &meta, &self.params.tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let loaded = checkpoint::load::<CodecMeta>(path)?;
        if loaded.meta.kind != "codec" {
            return Err(Error::Data(format!("{} is not a codec checkpoint", path.display())));
        }
        let config = loaded.meta.config;
        config.validate()?;
        let mut params = ParamStore::new(DType::F32, config.seed);
        for (k, t) in &loaded.tensors {
            params.insert(k, t)?;
        }
        let n_loaded = params.num_params();
        let codec = Self::assemble(config, params, loaded.meta.latent_scale, loaded.meta.training)?;
        if codec.params.num_params() != n_loaded {
            return Err(Error::Data(format!("{}: checkpoint is missing codec parameters", path.display())));
        }
        Ok(codec)
    }
}

/// Collects every training image (sources, targets and skeletons) of a dataset.
pub fn training_images(root: &Path, manifest: &DatasetManifest) -> Result<Vec<Image>> {
    let mut paths: Vec<PathBuf> = Vec::new();
    for r in manifest.split(Split::Train) {
        paths.push(root.join(&r.source.path));
        for t in &r.targets {
            paths.push(root.join(&t.image));
            paths.push(root.join(&t.skeleton));
        }
    }
    paths.iter().map(|p| Image::load_png(p)).collect()
}

const STREAM_CODEC_BATCH: u64 = 0xc0dec;
const STREAM_CODEC_SUBSET: u64 = 0xc0de5;

/// Trains the autoencoder on every training image of the dataset.
pub fn train_codec(root: &Path, manifest: &DatasetManifest, cfg: &CodecConfig) -> Result<Codec> {
    cfg.validate()?;
    let images = training_images(root, manifest)?;
    train_codec_on(&images, cfg, |_, _| {})
}

/// Trains on an explicit image list; `progress(step, loss)` is called per step.
pub fn train_codec_on(images: &[Image], cfg: &CodecConfig, mut progress: impl FnMut(usize, f64)) -> Result<Codec> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Input("codec training needs at least one image".into()));
    }
    let mut codec = Codec::new(cfg.clone())?;
    if cfg.latent_mode == LatentMode::Identity {
        codec.training =
            CodecTraining { images: images.len(), final_train_psnr: crate::evalkit::metrics::PSNR_CAP, ..Default::default() };
        return Ok(codec);
    }
    for img in images {
        codec.check_image(img)?;
    }
    let mut refs: Vec<&Image> = images.iter().collect();
    if let Some(max) = cfg.max_images.filter(|&m| m < refs.len()) {
        refs.shuffle(&mut seed::rng(cfg.seed, &[STREAM_CODEC_SUBSET]));
        refs.truncate(max.max(1));
    }
    let data = images_to_tensor(&refs)?;
    let n = refs.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut opt = Adam::new(cfg.learning_rate);
    let net = codec.net.as_ref().expect("learned codec has a network");
    let params = &codec.params;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.shuffle(&mut seed::rng(cfg.seed, &[STREAM_CODEC_BATCH, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            // Cosine decay to 5% of the base rate.
            let progress_frac = step as f64 / total.max(1) as f64;
            opt.lr = cfg.learning_rate * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * progress_frac).cos()));
            let idx = Tensor::from_slice(chunk, chunk.len(), &Device::Cpu)?;
            let x = data.index_select(&idx, 0)?;
            let recon = net.decode(&net.encode(&x)?)?;
            let loss = (recon - &x)?.sqr()?.mean_all()?;
            let lv = loss.to_scalar::<f32>()? as f64;
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("codec loss became {lv} at step {step}")));
            }
            let grads = gradients(params, &loss)?;
            opt.apply(params, &grads)?;
            progress(step, lv);
            step += 1;
        }
    }

    // Unit-scale the latent space for diffusion.
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut count = 0.0;
    for chunk in refs.chunks(64) {
        let z = net.encode(&images_to_tensor(chunk)?)?.flatten_all()?.to_dtype(DType::F64)?;
        sum += z.sum_all()?.to_scalar::<f64>()?;
        sum_sq += z.sqr()?.sum_all()?.to_scalar::<f64>()?;
        count += z.elem_count() as f64;
    }
    let var = (sum_sq / count - (sum / count).powi(2)).max(1e-12);
    codec.latent_scale = 1.0 / var.sqrt();

    let mse = reconstruction_mse(&codec, &refs)?;
    codec.training = CodecTraining {
        epochs: cfg.epochs,
        steps: step,
        images: n,
        final_train_mse: mse,
        final_train_psnr: crate::evalkit::metrics::psnr_from_mse(mse, crate::evalkit::metrics::PSNR_CAP),
    };
    Ok(codec)
}

/// Mean squared reconstruction error (clamped output) over `images`.
pub fn reconstruction_mse(codec: &Codec, images: &[&Image]) -> Result<f64> {
    let mut se = 0.0;
    let mut count = 0.0;
    for chunk in images.chunks(64) {
        let x = images_to_tensor(chunk)?;
        let recon = codec.decode_tensor(&codec.encode_tensor(&x)?)?.clamp(0.0, 1.0)?;
        se += (recon - &x)?.sqr()?.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
        count += x.elem_count() as f64;
    }
    Ok(se / count)
}

pub fn images_tensor(images: &[&Image]) -> Result<Tensor> {
    images_to_tensor(images)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(r: usize, phase: f32) -> Image {
        let data = (0..r * r * 3).map(|i| ((i as f32 * 0.013 + phase).sin() * 0.5 + 0.5).clamp(0.0, 1.0)).collect();
        Image::from_vec(r, r, data).unwrap()
    }

    #[test]
    fn identity_codec_passes_through() {
        let cfg = CodecConfig::identity(16);
        let codec = train_codec_on(&[gradient_image(16, 0.0)], &cfg, |_, _| {}).unwrap();
        assert_eq!(codec.training.steps, 0);
        let img = gradient_image(16, 0.3);
        let z = codec.encode(&img).unwrap();
        assert_eq!(z.dims(), (3, 16, 16));
        assert_eq!(codec.decode(&z).unwrap(), img);
        assert_eq!(codec.embed_skeleton(&img).unwrap().0, z);
    }

    #[test]
    fn identity_white_global_embedding() {
        let codec = Codec::new(CodecConfig::identity(16)).unwrap();
        let g = codec.embed_global(&Image::white(16, 16)).unwrap();
        let w = codec.global_proj.to_vec2::<f32>().unwrap();
        for (k, v) in g.0.iter().enumerate() {
            let expected: f32 = w.iter().map(|row| row[k]).sum();
            assert!((v - expected).abs() < 1e-5);
        }
        assert_eq!(g.0.len(), 128);
    }

    #[test]
    fn shape_checks() {
        let codec = Codec::new(CodecConfig { resolution: 32, ..Default::default() }).unwrap();
        assert!(matches!(codec.encode(&Image::white(16, 16)), Err(Error::Shape { .. })));
        let z = Latent::new(4, 4, 4, vec![0.0; 64]).unwrap();
        assert!(matches!(codec.decode(&z), Err(Error::Shape { .. })));
        let zero = Latent::new(4, 8, 8, vec![0.0; 256]).unwrap();
        let img = codec.decode(&zero).unwrap();
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn encode_deterministic_and_save_load() {
        let cfg = CodecConfig { resolution: 16, widths: vec![8, 8, 8], epochs: 1, batch_size: 2, ..Default::default() };
        let imgs: Vec<Image> = (0..4).map(|i| gradient_image(16, i as f32)).collect();
        let a = train_codec_on(&imgs, &cfg, |_, _| {}).unwrap();
        let b = train_codec_on(&imgs, &cfg, |_, _| {}).unwrap();
        for ((na, ta), (_, tb)) in a.params.tensors().iter().zip(b.params.tensors().iter()) {
            assert_eq!(
                ta.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                tb.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                "{na}"
            );
        }
        let z1 = a.encode(&imgs[0]).unwrap();
        assert_eq!(z1, a.encode(&imgs[0]).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("codec.skg");
        a.save(&p).unwrap();
        let c = Codec::load(&p).unwrap();
        assert_eq!(c.encode(&imgs[0]).unwrap(), z1);
        assert_eq!(c.decode(&z1).unwrap(), a.decode(&z1).unwrap());
        assert_eq!(c.embed_global(&imgs[1]).unwrap(), a.embed_global(&imgs[1]).unwrap());
    }

    #[test]
    fn empty_training_set() {
        assert!(matches!(train_codec_on(&[], &CodecConfig::default(), |_, _| {}), Err(Error::Input(_))));
    }
}
