//! The experiment stages behind the command line. Each stage writes a config
//! snapshot into its output directory before doing any work; wall-clock
//! times go only into `metadata.json`.

pub mod denoiser;
pub mod encode;
pub mod fit;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::codec::{self, Codec, CodecTraining};
use crate::config::{EvaluationConfig, ExperimentConfig};
use crate::diffusion::{sample_targets, NoiseSchedule, SamplerConfig, TargetCondition};
use crate::error::{Error, Result};
use crate::evalkit::analysis::{
    compare as compare_records, iou_trend, summarize, Comparison, IouTrend, Metric, SampleMetrics, Summary,
};
use crate::evalkit::report::{samples_csv, trend_svg};
use crate::evalkit::{fid_proxy, lpips_proxy, metric_l1, metric_psnr, metric_ssim, FeatureNet};
use crate::image::Image;
use crate::nn::ParamStore;
use crate::scenegen::dataset::{resolve, write_json};
use crate::scenegen::{generate_dataset, load_sample, DatasetManifest, Split};

pub use denoiser::{Denoiser, DenoiserMeta};
pub use encode::{encode_records, EncodedSample};
pub use fit::{probe_loss, Fit, StepRecord};

pub const CODEC_FILE: &str = "codec.ckpt";
pub const DENOISER_FILE: &str = "denoiser.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const INDEX_FILE: &str = "generated.json";
pub const REPORT_FILE: &str = "report.json";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const COMPARISON_FILE: &str = "comparison.json";
pub const QUALITY_FILE: &str = "skeleton_quality.json";
pub const METADATA_FILE: &str = "metadata.json";

/// Targets denoised together during sampling.
const SAMPLE_BATCH: usize = 32;

fn unix_seconds() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Wall-clock record of one stage.
pub struct Stopwatch {
    command: &'static str,
    started: f64,
    clock: Instant,
}

impl Stopwatch {
    pub fn start(command: &'static str) -> Self {
        Self { command, started: unix_seconds(), clock: Instant::now() }
    }

    pub fn finish(self, dir: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "started_unix": self.started,
            "finished_unix": unix_seconds(),
            "elapsed_seconds": self.clock.elapsed().as_secs_f64(),
        });
        write_json(&dir.join(METADATA_FILE), &meta)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.write_snapshot(out)?;
    let watch = Stopwatch::start("gen-data");
    let manifest = generate_dataset(&cfg.scenegen, out)?;
    watch.finish(out)?;
    Ok(manifest)
}

/// Trains the codec and writes `codec.ckpt`, `codec_loss.csv` and `codec_report.json` into `out`.
pub fn train_codec(cfg: &ExperimentConfig, data: &Path, out: &Path, verbose: bool) -> Result<Codec> {
    cfg.write_snapshot(out)?;
    let watch = Stopwatch::start("train-codec");
    let manifest = DatasetManifest::load(data)?;
    if manifest.config.resolution != cfg.codec.resolution {
        return Err(Error::Config(format!(
            "dataset resolution {} differs from codec resolution {}",
            manifest.config.resolution, cfg.codec.resolution
        )));
    }
    let images = codec::training_images(data, &manifest)?;
    let mut curve = String::from("step,loss\n");
    let codec = codec::train_codec_on(&images, &cfg.codec, |step, loss| {
        let _ = writeln!(curve, "{step},{loss}");
        if verbose && step % 50 == 0 {
            eprintln!("codec step {step} loss {loss:.6}");
        }
    })?;
    write_text(&out.join("codec_loss.csv"), &curve)?;
    codec.save(&out.join(CODEC_FILE))?;
    write_json(&out.join("codec_report.json"), &codec.training)?;
    watch.finish(out)?;
    Ok(codec)
}

/// Loaded codec checkpoint plus its training summary.
pub fn codec_summary(path: &Path) -> Result<CodecTraining> {
    Ok(Codec::load(path)?.training)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Initialize shared parameters from another denoiser (typically a baseline).
    pub warm_start: Option<PathBuf>,
    /// Continue a run from one of its checkpoints.
    pub resume: Option<PathBuf>,
    pub verbose: bool,
}

fn check_codec_fits(codec: &Codec, cfg: &ExperimentConfig) -> Result<()> {
    let (c, h, _) = codec.latent_dims();
    if c != cfg.unet.latent_channels || codec.config().global_dim != cfg.unet.global_dim {
        return Err(Error::Config("codec latent channels/global_dim do not match the unet config".into()));
    }
    if h % cfg.unet.downsample_factor() != 0 {
        return Err(Error::Config(format!("codec latent side {h} not divisible by the unet depth")));
    }
    Ok(())
}

/// Trains a denoiser on the train split. Writes `config.toml`, `loss.csv`,
/// `checkpoints/epoch_NNNN.ckpt` and `denoiser.ckpt` into `out`.
pub fn train(cfg: &ExperimentConfig, data: &Path, codec_path: &Path, out: &Path, opts: &TrainOptions) -> Result<Denoiser> {
    if opts.warm_start.is_some() && opts.resume.is_some() {
        return Err(Error::Config("warm start and resume are mutually exclusive".into()));
    }
    cfg.write_snapshot(out)?;
    let watch = Stopwatch::start("train");
    let manifest = DatasetManifest::load(data)?;
    let codec = Codec::load(codec_path)?;
    check_codec_fits(&codec, cfg)?;
    let records: Vec<_> = manifest.split(Split::Train).collect();
    let samples = encode_records(&codec, data, &records)?;

    let tcfg = &cfg.training;
    let mut params = ParamStore::new(DType::F32, tcfg.seed);
    let mut meta = denoiser::new_meta(cfg.unet.clone(), cfg.diffusion.schedule, denoiser::codec_ref(codec_path)?, tcfg.seed);
    let mut adam_state = None;
    if let Some(path) = &opts.resume {
        let (prev, adam) = Denoiser::load(path)?;
        if prev.meta.unet != cfg.unet || prev.meta.schedule != cfg.diffusion.schedule || prev.meta.training.seed != tcfg.seed {
            return Err(Error::Config(format!("{} was trained with a different unet, schedule or seed", path.display())));
        }
        for (name, t) in prev.params.tensors() {
            params.insert(&name, &t)?;
        }
        meta.training = prev.meta.training.clone();
        adam_state = Some(adam);
    }
    if let Some(path) = &opts.warm_start {
        let (prev, _) = Denoiser::load(path)?;
        let mut same = prev.meta.unet.clone();
        same.mode = cfg.unet.mode;
        if same != cfg.unet {
            return Err(Error::Config(format!("{} differs from this unet beyond its mode", path.display())));
        }
        if prev.meta.unet.mode.uses_skeleton() && !cfg.unet.mode.uses_skeleton() {
            return Err(Error::Config("cannot warm-start a skeleton-free model from a skeleton-guided one".into()));
        }
        for (name, t) in prev.params.tensors() {
            params.insert(&name, &t)?;
        }
        meta.training.warm_start = Some(path.to_string_lossy().into_owned());
    }
    let mut den = Denoiser::build(params, meta)?;
    let sched = den.schedule()?;

    let mut fit = Fit::new(&den.net, &den.params, &sched, tcfg);
    if let Some(state) = &adam_state {
        fit.adam.restore(den.meta.training.steps as u64, state);
        fit.epoch = den.meta.training.epochs_completed;
        fit.step = den.meta.training.steps;
    }

    let loss_path = out.join(LOSS_FILE);
    let mut curve = String::from("step,epoch,loss\n");
    if opts.resume.is_some() {
        if let Ok(prev) = std::fs::read_to_string(&loss_path) {
            for line in prev.lines().skip(1) {
                let step: usize = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
                if step <= fit.step {
                    curve.push_str(line);
                    curve.push('\n');
                }
            }
        }
    }
    let mut file = std::fs::File::create(&loss_path).map_err(|e| Error::io(&loss_path, e))?;
    file.write_all(curve.as_bytes()).map_err(|e| Error::io(&loss_path, e))?;

    let ckpt_dir = out.join("checkpoints");
    let mut last_loss = den.meta.training.last_loss;
    while !fit.done() {
        fit.run_epoch(&samples, &mut |r: StepRecord| {
            last_loss = r.loss;
            writeln!(file, "{},{},{}", r.step, r.epoch, r.loss).map_err(|e| Error::io(&loss_path, e))?;
            if opts.verbose {
                eprintln!("step {} epoch {} loss {:.6}", r.step, r.epoch, r.loss);
            }
            Ok(())
        })?;
        let every = tcfg.checkpoint_every;
        if every > 0 && fit.epoch.is_multiple_of(every) {
            let snapshot = snapshot_meta(&den.meta, fit.epoch, fit.step, last_loss);
            let view = DenoiserView { params: &den.params, meta: &snapshot };
            view.save(&ckpt_dir.join(format!("epoch_{:04}.ckpt", fit.epoch)), &fit.adam)?;
        }
    }
    let (epoch, step, adam) = (fit.epoch, fit.step, fit.adam);
    den.meta = snapshot_meta(&den.meta, epoch, step, last_loss);
    den.save(&out.join(DENOISER_FILE), Some(&adam))?;
    watch.finish(out)?;
    Ok(den)
}

fn snapshot_meta(meta: &DenoiserMeta, epoch: usize, step: usize, loss: f64) -> DenoiserMeta {
    let mut m = meta.clone();
    m.training.epochs_completed = epoch;
    m.training.steps = step;
    m.training.last_loss = loss;
    m
}

/// Saves parameters under metadata other than the denoiser's own.
struct DenoiserView<'a> {
    params: &'a ParamStore,
    meta: &'a DenoiserMeta,
}

impl DenoiserView<'_> {
    fn save(&self, path: &Path, adam: &crate::nn::Adam) -> Result<()> {
        let mut tensors = self.params.tensors();
        tensors.extend(adam.state_tensors());
        checkpoint::save(path, self.meta, &tensors)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedEntry {
    pub target_id: String,
    /// Relative to the sampling output directory.
    pub image: String,
    /// Relative to the dataset root.
    pub target: String,
    pub bbox_iou: f64,
    pub degradation_level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedIndex {
    pub method: String,
    pub denoiser_sha256: String,
    pub data: String,
    pub split: Split,
    pub sampler: SamplerConfig,
    pub entries: Vec<GeneratedEntry>,
}

fn panel_name(dir: &str) -> String {
    dir.replace('/', "_")
}

/// Samples every target of `split` (up to `limit` source views) and writes
/// raw PNGs, source|target|skeleton|generated panels and `generated.json`.
pub fn sample(
    cfg: &ExperimentConfig,
    denoiser_path: &Path,
    data: &Path,
    split: Split,
    limit: Option<usize>,
    out: &Path,
) -> Result<GeneratedIndex> {
    cfg.write_snapshot(out)?;
    let watch = Stopwatch::start("sample");
    let (den, _) = Denoiser::load(denoiser_path)?;
    let codec = den.load_codec(denoiser_path)?;
    let manifest = DatasetManifest::load(data)?;
    let mut records: Vec<_> = manifest.split(split).collect();
    if let Some(n) = limit {
        records.truncate(n);
    }
    if records.is_empty() {
        return Err(Error::Data(format!("no {} samples in {}", split.as_str(), data.display())));
    }
    let sched = den.schedule()?;
    let samples = encode_records(&codec, data, &records)?;
    let generated = generate(&den, &samples, &cfg.diffusion.sampler, &sched)?;
    let images = codec.decode_many(&generated.iter().collect::<Vec<_>>())?;

    let mut entries = Vec::new();
    let mut panels = Vec::new();
    let mut flat = images.into_iter();
    for (rec, s) in records.iter().zip(&samples) {
        let view = load_sample(data, rec)?;
        let mut rows = Vec::new();
        for (j, (tgt, tv)) in s.targets.iter().zip(&view.targets).enumerate() {
            let img = flat.next().expect("one image per target").quantized();
            let rel = format!("generated/{}/gen_{j}.png", rec.dir());
            let path = out.join(&rel);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            img.save_png(&path)?;
            rows.push(Image::hstack(&[&view.source, &tv.image, &tv.skeleton, &img], 2)?);
            entries.push(GeneratedEntry {
                target_id: tgt.id.clone(),
                image: rel,
                target: rec.targets[j].image.clone(),
                bbox_iou: tgt.bbox_iou,
                degradation_level: tgt.degradation_level,
            });
        }
        let panel = Image::vstack(&rows, 2)?;
        let path = out.join("panels").join(format!("{}.png", panel_name(&rec.dir())));
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        panel.save_png(&path)?;
        panels.push(panel);
    }
    panels.truncate(8);
    Image::vstack(&panels, 4)?.save_png(&out.join("grid.png"))?;

    let index = GeneratedIndex {
        method: den.meta.unet.mode.name().into(),
        denoiser_sha256: checkpoint::file_digest(denoiser_path)?,
        data: data.to_string_lossy().into_owned(),
        split,
        sampler: cfg.diffusion.sampler,
        entries,
    };
    write_json(&out.join(INDEX_FILE), &index)?;
    watch.finish(out)?;
    Ok(index)
}

/// Denoises every target of `samples`, in order.
pub fn generate(
    den: &Denoiser,
    samples: &[EncodedSample],
    sampler: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Vec<codec::Latent>> {
    let uses_rays = den.meta.unet.mode.uses_rays();
    let conds: Vec<TargetCondition> = samples
        .iter()
        .flat_map(|s| {
            s.targets.iter().map(move |t| TargetCondition {
                z_src: &s.z_src,
                skeleton: &t.skeleton,
                global: &s.global,
                camera: uses_rays.then_some(t.camera),
            })
        })
        .collect();
    let mut out = Vec::with_capacity(conds.len());
    for chunk in conds.chunks(SAMPLE_BATCH) {
        out.extend(sample_targets(&den.net, chunk, sampler, sched)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub summary: Summary,
    /// Fréchet distance between random-feature statistics; a proxy, not FID.
    pub fid_proxy: f64,
    pub samples: Vec<SampleMetrics>,
}

/// Scores a sampling directory against its dataset targets; writes
/// `report.json` and `samples.csv` into `out`.
pub fn evaluate(cfg: &ExperimentConfig, generated: &Path, data: Option<&Path>, out: &Path) -> Result<MetricReport> {
    cfg.write_snapshot(out)?;
    let watch = Stopwatch::start("evaluate");
    let index: GeneratedIndex = read_json(&generated.join(INDEX_FILE))?;
    let data = data.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&index.data));
    let report = score(&cfg.evaluation, &index, generated, &data)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    write_text(&out.join(SAMPLES_FILE), &samples_csv(&report.samples))?;
    watch.finish(out)?;
    Ok(report)
}

pub fn score(cfg: &EvaluationConfig, index: &GeneratedIndex, generated: &Path, data: &Path) -> Result<MetricReport> {
    let net = FeatureNet::new(&cfg.features)?;
    let mut gens = Vec::new();
    let mut tgts = Vec::new();
    let mut samples = Vec::new();
    for e in &index.entries {
        let g = Image::load_png(&generated.join(&e.image))?;
        let t = Image::load_png(&resolve(data, &e.target))?;
        samples.push(SampleMetrics {
            target_id: e.target_id.clone(),
            bbox_iou: e.bbox_iou,
            degradation: e.degradation_level,
            l1: metric_l1(&g, &t)?,
            psnr: metric_psnr(&g, &t, cfg.psnr_cap)?,
            ssim: metric_ssim(&g, &t)?,
            lpips: lpips_proxy(&net, &g, &t)?,
        });
        gens.push(g);
        tgts.push(t);
    }
    samples.sort_by(|a, b| a.target_id.cmp(&b.target_id));
    let fid = if gens.len() >= 2 {
        fid_proxy(&net, &gens.iter().collect::<Vec<_>>(), &tgts.iter().collect::<Vec<_>>())?
    } else {
        f64::NAN
    };
    Ok(MetricReport { method: index.method.clone(), summary: summarize(&samples), fid_proxy: fid, samples })
}

pub fn load_report(path: &Path) -> Result<MetricReport> {
    let path = if path.is_dir() { path.join(REPORT_FILE) } else { path.to_path_buf() };
    read_json(&path)
}

/// Markdown table of means ± std and one-sided test results.
pub fn comparison_table(c: &Comparison, ours: &MetricReport, reference: &MetricReport) -> String {
    let mut s = format!("| metric | {} | {} | alternative | U | p | p<0.05 | p<0.01 |\n", c.ours, c.reference);
    s.push_str("|---|---|---|---|---|---|---|---|\n");
    for m in &c.metrics {
        let name = m.metric.name();
        let _ = writeln!(
            s,
            "| {}{} | {:.4} ± {:.4} | {:.4} ± {:.4} | {} | {:.1} | {:.3e} | {} | {} |",
            name,
            if m.metric == Metric::Lpips { " (proxy)" } else { "" },
            m.mean_ours,
            ours.summary.stds[name],
            m.mean_reference,
            reference.summary.stds[name],
            if m.alternative == crate::evalkit::Alternative::Less { "less" } else { "greater" },
            m.u,
            m.p_value,
            if m.significant_05 { "yes" } else { "no" },
            if m.significant_01 { "yes" } else { "no" },
        );
    }
    let _ = writeln!(s, "\nfid_proxy: {} {:.4}, {} {:.4}", c.ours, ours.fid_proxy, c.reference, reference.fid_proxy);
    s
}

/// Compares two metric reports; writes `comparison.json` and `comparison.md`.
pub fn compare(cfg: &ExperimentConfig, ours: &Path, reference: &Path, out: &Path) -> Result<Comparison> {
    cfg.write_snapshot(out)?;
    let watch = Stopwatch::start("compare");
    let a = load_report(ours)?;
    let b = load_report(reference)?;
    let c = compare_records(&a.method, &a.samples, &b.method, &b.samples)?;
    write_json(&out.join(COMPARISON_FILE), &c)?;
    write_text(&out.join("comparison.md"), &comparison_table(&c, &a, &b))?;
    watch.finish(out)?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonQuality {
    pub ours: String,
    pub reference: String,
    pub degradation_levels: Vec<f64>,
    pub trends: Vec<IouTrend>,
}

fn bins_csv(trends: &[IouTrend]) -> String {
    let mut s = String::from("metric,lo,hi,count,mean_iou,mean_improvement,bootstrap_se\n");
    for t in trends {
        for b in &t.bins {
            let _ = writeln!(
                s,
                "{},{:.9},{:.9},{},{:.9},{:.9},{:.9}",
                t.metric.name(),
                b.lo,
                b.hi,
                b.count,
                b.mean_iou,
                b.mean_improvement,
                b.bootstrap_se
            );
        }
    }
    s
}

/// IoU-binned improvement of `ours` over `reference` for every metric;
/// writes the JSON summary, a bin table and one SVG per metric.
pub fn skeleton_quality_from_reports(
    cfg: &EvaluationConfig,
    ours: &MetricReport,
    reference: &MetricReport,
    out: &Path,
) -> Result<SkeletonQuality> {
    let levels: BTreeSet<u64> = ours.samples.iter().map(|s| s.degradation.to_bits()).collect();
    if levels.len() < 2 {
        return Err(Error::Data("skeleton-quality needs targets at two or more degradation levels".into()));
    }
    let mut degradation_levels: Vec<f64> = levels.into_iter().map(f64::from_bits).collect();
    degradation_levels.sort_by(f64::total_cmp);
    let trends = Metric::ALL
        .iter()
        .map(|&m| iou_trend(m, &ours.samples, &reference.samples, cfg.bins, cfg.bootstrap, cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    for t in &trends {
        let title = format!("{} improvement of {} over {} by skeleton IoU", t.metric.name(), ours.method, reference.method);
        write_text(&out.join(format!("trend_{}.svg", t.metric.name())), &trend_svg(t, &title))?;
    }
    write_text(&out.join("trend_bins.csv"), &bins_csv(&trends))?;
    let q = SkeletonQuality { ours: ours.method.clone(), reference: reference.method.clone(), degradation_levels, trends };
    write_json(&out.join(QUALITY_FILE), &q)?;
    Ok(q)
}

/// Samples and evaluates both denoisers on the test split, then bins the
/// improvement by skeleton IoU. Per-model outputs go to `out/<mode>/`.
pub fn skeleton_quality(
    cfg: &ExperimentConfig,
    ours: &Path,
    reference: &Path,
    data: &Path,
    limit: Option<usize>,
    out: &Path,
) -> Result<SkeletonQuality> {
    cfg.write_snapshot(out)?;
    let watch = Stopwatch::start("skeleton-quality");
    let manifest = DatasetManifest::load(data)?;
    if manifest.config.degradation.test_levels.len() < 2 {
        return Err(Error::Data("dataset has no skeleton degradation sweep on its test split".into()));
    }
    let mut reports = Vec::new();
    for (tag, ckpt) in [("ours", ours), ("reference", reference)] {
        let dir = out.join(tag);
        sample(cfg, ckpt, data, Split::Test, limit, &dir)?;
        reports.push(evaluate(cfg, &dir, Some(data), &dir)?);
    }
    let q = skeleton_quality_from_reports(&cfg.evaluation, &reports[0], &reports[1], out)?;
    watch.finish(out)?;
    Ok(q)
}
