//! Acceptance suite. Every criterion prints one line
//! `criterion N: PASS|FAIL | title | measurements` straight to stderr (so it
//! shows without `--nocapture`) and then asserts.
//!
//! Tests take a process-wide lock so that runtime limits are measured
//! without other criteria competing for the CPU.
//!
//! The desk experiment (criteria 6 and 7) runs from scratch into
//! `$CARGO_TARGET_TMPDIR/acceptance-desk`. Set `SKELGUIDE_ACCEPTANCE_REUSE=1`
//! to reuse a completed run there; its compute time is then read back from
//! the stage metadata files.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use skelguide::codec::{self, GlobalEmbedding, Latent, SkeletonEmbedding};
use skelguide::config::ExperimentConfig;
use skelguide::diffusion::{
    make_schedule, per_target_loss, q_sample, q_sample_with, sample_targets, training_loss, Denoiser, DiffusionBatch,
    NoiseSchedule, SamplerConfig, SamplerKind, TargetCondition,
};
use skelguide::evalkit::analysis::Metric;
use skelguide::evalkit::features::frechet_distance;
use skelguide::evalkit::{mann_whitney_u, metric_psnr, metric_ssim, Alternative, PSNR_CAP};
use skelguide::nn::{gradients, ParamStore};
use skelguide::pipeline::{self, encode_records, probe_loss, Fit, MetricReport, TrainOptions};
use skelguide::scenegen::{generate_dataset, DatasetManifest, Split};
use skelguide::unet::{group_normalize, modulate, scn_modulate, Conditioning, Mode, ModulationMlp, UNet, UNetConfig};
use skelguide::Image;

/// Every tolerance and limit used below.
mod tol {
    /// Criterion 1: absolute agreement with the scalar oracles.
    pub const NORM_ORACLE: f64 = 1e-6;
    pub const NORM_CASES: usize = 50;
    pub const NORM_RUNTIME_S: u64 = 10;

    pub const ZERO_INIT_CASES: usize = 10;
    pub const ZERO_INIT_RUNTIME_S: u64 = 30;

    /// Criterion 3: central differences with this step, in f64.
    pub const FD_STEP: f64 = 1e-4;
    pub const FD_MAX_REL: f64 = 1e-4;
    /// Relative error is `|a − f| / max(|a|, |f|, FD_FLOOR)`; gradients below
    /// the floor are compared on an absolute scale instead.
    pub const FD_FLOOR: f64 = 1e-6;
    pub const FD_MIN_SAMPLED: usize = 200;
    pub const FD_SAMPLED: usize = 256;
    pub const FD_MAX_PARAMS: usize = 5000;
    pub const FD_RUNTIME_S: u64 = 300;

    /// Criterion 4.
    pub const MC_DRAWS: usize = 10_000;
    pub const MC_SE: f64 = 3.0;
    /// Loss of the exact noise oracle: zero up to f64 rounding.
    pub const ORACLE_LOSS: f64 = 1e-12;
    pub const DIFFUSION_RUNTIME_S: u64 = 60;

    /// Criterion 5.
    pub const OVERFIT_SAMPLES: usize = 8;
    pub const OVERFIT_STEPS: usize = 200;
    pub const OVERFIT_RATIO: f64 = 0.25;
    /// Training continues on the same optimizer up to this many updates
    /// before sampling; the loss ratio is judged at `OVERFIT_STEPS`.
    pub const MEMORIZE_STEPS: usize = 600;
    /// Mean over the first target of this many memorized samples.
    pub const MEMORIZED_TARGETS: usize = 4;
    pub const MEMORIZED_PSNR_DB: f64 = 20.0;
    pub const OVERFIT_RUNTIME_S: u64 = 600;

    /// Criterion 6.
    pub const DESK_MIN_TRAIN_OBJECTS: usize = 64;
    pub const DESK_MIN_TEST_OBJECTS: usize = 16;
    pub const DESK_RESOLUTION: usize = 64;
    pub const DESK_ALPHA: f64 = 0.05;
    pub const DESK_BUDGET_S: f64 = 4.0 * 3600.0;

    /// Criterion 7.
    pub const TREND_MIN_LEVELS: usize = 4;

    /// Criterion 8.
    pub const KNOWN_VALUE: f64 = 1e-9;
    pub const PSNR_HALF_DB: f64 = 6.0206;
    pub const PSNR_DIGITS: f64 = 5e-5;
}

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: usize, title: &str, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} | {title} | {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {detail}");
}

fn progress(msg: &str) {
    let _ = std::io::stderr().lock().write_all(format!("  [acceptance] {msg}\n").as_bytes());
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn randn_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

fn tensor_f64(v: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

/// Sets every parameter whose name contains `pattern` to N(0, std²).
fn randomize(ps: &ParamStore, pattern: &str, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, var) in ps.vars() {
        if name.contains(pattern) {
            let n = var.as_tensor().elem_count();
            let v: Vec<f64> = randn_vec(&mut rng, n).into_iter().map(|x| x * std).collect();
            let t = tensor_f64(v, var.as_tensor().dims()).to_dtype(var.as_tensor().dtype()).unwrap();
            var.set(&t).unwrap();
        }
    }
}

// ---------------------------------------------------------------------------
// Criterion 1

fn oracle_group_norm(x: &[f64], (b, c, h, w): (usize, usize, usize, usize), groups: usize, eps: f64) -> Vec<f64> {
    let per = c / groups * h * w;
    let mut out = vec![0.0; x.len()];
    for n in 0..b {
        for g in 0..groups {
            let start = n * c * h * w + g * per;
            let vals = &x[start..start + per];
            let mean = vals.iter().sum::<f64>() / per as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per as f64;
            for (i, v) in vals.iter().enumerate() {
                out[start + i] = (v - mean) / (var + eps).sqrt();
            }
        }
    }
    out
}

fn param(ps: &ParamStore, name: &str) -> Vec<f64> {
    let (_, v) = ps.vars().find(|(n, _)| n.as_str() == name).unwrap_or_else(|| panic!("{name}"));
    flat(v.as_tensor())
}

/// `GN(x)·(1+γ)+β` with the two-layer 1×1 MLP evaluated pixel by pixel.
#[allow(clippy::too_many_arguments)]
fn oracle_scn(
    x: &[f64],
    s: &[f64],
    dims: (usize, usize, usize, usize),
    cs: usize,
    groups: usize,
    eps: f64,
    ps: &ParamStore,
    name: &str,
) -> Vec<f64> {
    let (b, c, h, w) = dims;
    let n = oracle_group_norm(x, dims, groups, eps);
    let (w1, b1) = (param(ps, &format!("{name}.hidden.weight")), param(ps, &format!("{name}.hidden.bias")));
    let (w2, b2) = (param(ps, &format!("{name}.out.weight")), param(ps, &format!("{name}.out.bias")));
    let hid = b1.len();
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for y in 0..h {
            for xi in 0..w {
                let sv: Vec<f64> = (0..cs).map(|k| s[((bi * cs + k) * h + y) * w + xi]).collect();
                let hv: Vec<f64> = (0..hid)
                    .map(|j| {
                        let a = b1[j] + (0..cs).map(|k| w1[j * cs + k] * sv[k]).sum::<f64>();
                        a / (1.0 + (-a).exp())
                    })
                    .collect();
                for ch in 0..c {
                    let gamma = b2[ch] + (0..hid).map(|j| w2[ch * hid + j] * hv[j]).sum::<f64>();
                    let beta = b2[c + ch] + (0..hid).map(|j| w2[(c + ch) * hid + j] * hv[j]).sum::<f64>();
                    let i = ((bi * c + ch) * h + y) * w + xi;
                    out[i] = n[i] * (1.0 + gamma) + beta;
                }
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_1_normalization_matches_scalar_oracles() {
    let _lock = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let eps = 1e-5;
    let (mut worst_gn, mut worst_scn) = (0.0f64, 0.0f64);
    let mut zero_exact = true;
    for case in 0..tol::NORM_CASES {
        let groups = [1, 2, 4][rng.gen_range(0..3)];
        let c = groups * rng.gen_range(1..4);
        let (b, h, w) = (rng.gen_range(1..4), rng.gen_range(1..7), rng.gen_range(1..7));
        let cs = rng.gen_range(1..5);
        let (scale, shift) = (rng.gen_range(0.1..4.0), rng.gen_range(-5.0..5.0));
        let x: Vec<f64> = randn_vec(&mut rng, b * c * h * w).into_iter().map(|v| v * scale + shift).collect();
        let s = randn_vec(&mut rng, b * cs * h * w);
        let xt = tensor_f64(x.clone(), &[b, c, h, w]);
        let st = tensor_f64(s.clone(), &[b, cs, h, w]);

        let gn = flat(&group_normalize(&xt, groups, eps).unwrap());
        worst_gn = worst_gn.max(max_abs_diff(&gn, &oracle_group_norm(&x, (b, c, h, w), groups, eps)));

        let mut ps = ParamStore::new(DType::F64, case as u64);
        let mlp = ModulationMlp::new(&mut ps, "m", cs, c, 2).unwrap();
        // Fresh branch: the zero-initialized output layer makes this exactly GN.
        let fresh = flat(&scn_modulate(&xt, &st, &mlp, groups, eps).unwrap());
        zero_exact &= fresh.iter().zip(&gn).all(|(a, b)| a.to_bits() == b.to_bits());
        let zeros = Tensor::zeros((b, c, h, w), DType::F64, &Device::Cpu).unwrap();
        let gn_t = group_normalize(&xt, groups, eps).unwrap();
        zero_exact &= flat(&modulate(&gn_t, &zeros, &zeros).unwrap()).iter().zip(&gn).all(|(a, b)| a.to_bits() == b.to_bits());

        randomize(&ps, "m.out", 0.5, 100 + case as u64);
        let scn = flat(&scn_modulate(&xt, &st, &mlp, groups, eps).unwrap());
        worst_scn = worst_scn.max(max_abs_diff(&scn, &oracle_scn(&x, &s, (b, c, h, w), cs, groups, eps, &ps, "m")));
    }
    let elapsed = start.elapsed();
    let pass = worst_gn < tol::NORM_ORACLE
        && worst_scn < tol::NORM_ORACLE
        && zero_exact
        && elapsed < Duration::from_secs(tol::NORM_RUNTIME_S);
    verdict(
        1,
        "group_normalize / scn_modulate vs scalar oracles",
        pass,
        &format!(
            "{} cases, max |Δ| gn {worst_gn:.2e}, scn {worst_scn:.2e} (tol {:.0e}), zero modulation bit-exact: {zero_exact}, {:.2}s",
            tol::NORM_CASES,
            tol::NORM_ORACLE,
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2

fn desk_config() -> ExperimentConfig {
    ExperimentConfig::load(&workspace().join("configs/desk.toml")).expect("configs/desk.toml")
}

fn random_conditioning(
    rng: &mut ChaCha8Rng,
    n: usize,
    dims: (usize, usize, usize),
    global: usize,
) -> (Tensor, Vec<usize>, Conditioning) {
    let (c, h, w) = dims;
    let t = |rng: &mut ChaCha8Rng, shape: &[usize]| {
        let len = shape.iter().product();
        tensor_f64(randn_vec(rng, len), shape).to_dtype(DType::F32).unwrap()
    };
    let z = t(rng, &[n, c, h, w]);
    let cond = Conditioning {
        z_src: t(rng, &[n, c, h, w]),
        skeleton: t(rng, &[n, c, h, w]),
        global: t(rng, &[n, global]),
        cameras: None,
    };
    let steps = (0..n).map(|_| rng.gen_range(0..256)).collect();
    (z, steps, cond)
}

#[test]
fn criterion_2_zero_init_equivalence() {
    let _lock = serial();
    let start = Instant::now();
    let cfg = desk_config();
    let ucfg = |mode| UNetConfig { mode, ..cfg.unet.clone() };
    let mut base_ps = ParamStore::new(DType::F32, 17);
    let base = UNet::new(&mut base_ps, &ucfg(Mode::Baseline)).unwrap();
    // The scn model is built on top of the baseline's tensors; only its
    // modulation branches are new.
    let mut scn_ps = ParamStore::new(DType::F32, 99);
    for (name, t) in base_ps.tensors() {
        scn_ps.insert(&name, &t).unwrap();
    }
    let scn = UNet::new(&mut scn_ps, &ucfg(Mode::Scn)).unwrap();
    let new_params = scn_ps.num_params() - base_ps.num_params();

    let dims = cfg.codec.latent_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut identical = 0;
    for _ in 0..tol::ZERO_INIT_CASES {
        let (z, t, cond) = random_conditioning(&mut rng, 2, dims, cfg.unet.global_dim);
        let a: Vec<f32> = base.forward(&z, &t, &cond).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = scn.forward(&z, &t, &cond).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        identical += usize::from(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let elapsed = start.elapsed();
    let pass = identical == tol::ZERO_INIT_CASES && new_params > 0 && elapsed < Duration::from_secs(tol::ZERO_INIT_RUNTIME_S);
    verdict(
        2,
        "fresh scn UNet is bit-identical to its baseline",
        pass,
        &format!(
            "{identical}/{} inputs bit-identical, {new_params} modulation parameters added to {}, {:.2}s",
            tol::ZERO_INIT_CASES,
            base_ps.num_params(),
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3

fn micro_unet() -> UNetConfig {
    UNetConfig {
        mode: Mode::Scn,
        latent_channels: 2,
        base_channels: 4,
        channel_mults: vec![1],
        groups: 2,
        mlp_hidden_mult: 1,
        attention_levels: vec![0],
        global_dim: 3,
        global_tokens: 2,
        ..UNetConfig::default()
    }
}

fn latent(rng: &mut ChaCha8Rng, (c, h, w): (usize, usize, usize)) -> Latent {
    Latent::new(c, h, w, randn_vec(rng, c * h * w).into_iter().map(|v| v as f32).collect()).unwrap()
}

fn random_batch(
    rng: &mut ChaCha8Rng,
    dims: (usize, usize, usize),
    targets: usize,
    global: usize,
    steps: usize,
) -> DiffusionBatch {
    DiffusionBatch {
        z_src: latent(rng, dims),
        z_tgt: (0..targets).map(|_| latent(rng, dims)).collect(),
        skeletons: (0..targets).map(|_| SkeletonEmbedding(latent(rng, dims))).collect(),
        global: GlobalEmbedding(randn_vec(rng, global).into_iter().map(|v| v as f32).collect()),
        t: (0..targets).map(|_| rng.gen_range(0..steps)).collect(),
        eps: (0..targets).map(|_| latent(rng, dims)).collect(),
        cameras: Vec::new(),
    }
}

#[test]
fn criterion_3_gradients_match_finite_differences() {
    let _lock = serial();
    let start = Instant::now();
    let cfg = micro_unet();
    let mut ps = ParamStore::new(DType::F64, 3);
    let net = UNet::new(&mut ps, &cfg).unwrap();
    // Activate the modulation branches so every parameter carries gradient.
    randomize(&ps, ".scn.out", 0.3, 33);
    let sched = make_schedule(64, 1e-4, 2e-2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batches: Vec<DiffusionBatch> = (0..2).map(|_| random_batch(&mut rng, (2, 4, 4), 2, 3, sched.len())).collect();
    let loss = |net: &UNet| -> f64 { training_loss(&batches, net, &sched).unwrap().to_scalar::<f64>().unwrap() };

    let grads = gradients(&ps, &training_loss(&batches, &net, &sched).unwrap()).unwrap();
    let mut index: Vec<(String, usize)> = Vec::new();
    for (name, var) in ps.vars() {
        index.extend((0..var.as_tensor().elem_count()).map(|i| (name.clone(), i)));
    }
    let total = index.len();
    let picks = sample_indices(&mut rng, total, tol::FD_SAMPLED.min(total));
    let vars: BTreeMap<String, candle_core::Var> = ps.vars().map(|(n, v)| (n.clone(), v.clone())).collect();

    let mut worst = 0.0f64;
    let mut within = 0;
    for k in picks.iter() {
        let (name, i) = &index[k];
        let var = &vars[name];
        let original = var.as_tensor().copy().unwrap();
        let shape = original.dims().to_vec();
        let mut values = flat(&original);
        let eval_at = |values: &[f64]| {
            var.set(&tensor_f64(values.to_vec(), &shape)).unwrap();
            loss(&net)
        };
        let x0 = values[*i];
        values[*i] = x0 + tol::FD_STEP;
        let up = eval_at(&values);
        values[*i] = x0 - tol::FD_STEP;
        let down = eval_at(&values);
        var.set(&original).unwrap();
        let fd = (up - down) / (2.0 * tol::FD_STEP);
        let analytic = grads.get(name).map_or(0.0, |g| flat(g)[*i]);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(tol::FD_FLOOR);
        worst = worst.max(rel);
        within += usize::from(rel < tol::FD_MAX_REL);
    }
    let sampled = picks.len();
    let elapsed = start.elapsed();
    let pass = total <= tol::FD_MAX_PARAMS
        && sampled >= tol::FD_MIN_SAMPLED
        && within == sampled
        && elapsed < Duration::from_secs(tol::FD_RUNTIME_S);
    verdict(
        3,
        "loss gradients vs central finite differences (f64)",
        pass,
        &format!(
            "{total} params, {within}/{sampled} sampled within rel {:.0e} (step {:.0e}), worst {worst:.2e}, {:.1}s",
            tol::FD_MAX_REL,
            tol::FD_STEP,
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 4

/// Predicts the exact noise from the clean latents it was given.
struct EpsOracle<'a> {
    z0: Tensor,
    sched: &'a NoiseSchedule,
}

impl Denoiser for EpsOracle<'_> {
    fn dtype(&self) -> DType {
        DType::F64
    }

    fn predict(&self, z_t: &Tensor, t: &[usize], _cond: &Conditioning) -> skelguide::Result<Tensor> {
        let n = t.len();
        let a: Vec<f64> = t.iter().map(|&s| self.sched.alpha_bars[s].sqrt()).collect();
        let b: Vec<f64> = t.iter().map(|&s| (1.0 - self.sched.alpha_bars[s]).sqrt()).collect();
        let a = Tensor::from_vec(a, (n, 1, 1, 1), &Device::Cpu)?;
        let b = Tensor::from_vec(b, (n, 1, 1, 1), &Device::Cpu)?;
        Ok((z_t - self.z0.broadcast_mul(&a)?)?.broadcast_div(&b)?)
    }
}

struct ZeroModel;

impl Denoiser for ZeroModel {
    fn dtype(&self) -> DType {
        DType::F64
    }

    fn predict(&self, z_t: &Tensor, _t: &[usize], _cond: &Conditioning) -> skelguide::Result<Tensor> {
        Ok(z_t.zeros_like()?)
    }
}

#[test]
fn criterion_4_forward_process_and_loss() {
    let _lock = serial();
    let start = Instant::now();
    let sched = NoiseSchedule::from_config(&Default::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dims = (1, 2, 2);

    let z0 = latent(&mut rng, dims);
    let e = latent(&mut rng, dims);
    let endpoints = q_sample_with(&z0, 1.0, &e).unwrap() == z0 && q_sample_with(&z0, 0.0, &e).unwrap() == e;

    let n = tol::MC_DRAWS as f64;
    let mut checks = 0;
    let mut ok = 0;
    let mut worst_z = 0.0f64;
    for t in [0, sched.len() / 2, sched.len() - 1] {
        let ab = sched.alpha_bars[t];
        let draws: Vec<Latent> = (0..tol::MC_DRAWS).map(|_| q_sample(&z0, t, &latent(&mut rng, dims), &sched).unwrap()).collect();
        for k in 0..4 {
            let xs: Vec<f64> = draws.iter().map(|d| d.data[k] as f64).collect();
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let (mu, sigma2) = (ab.sqrt() * z0.data[k] as f64, 1.0 - ab);
            let z_mean = (mean - mu).abs() / (sigma2 / n).sqrt();
            let z_var = (var - sigma2).abs() / (sigma2 * (2.0 / (n - 1.0)).sqrt());
            for z in [z_mean, z_var] {
                checks += 1;
                ok += usize::from(z < tol::MC_SE);
                worst_z = worst_z.max(z);
            }
        }
    }

    let batches: Vec<DiffusionBatch> = (0..16).map(|_| random_batch(&mut rng, (4, 8, 8), 4, 3, sched.len())).collect();
    let z0s: Vec<&Latent> = batches.iter().flat_map(|b| b.z_tgt.iter()).collect();
    let oracle = EpsOracle { z0: Latent::batch(&z0s).unwrap().to_dtype(DType::F64).unwrap(), sched: &sched };
    let oracle_loss = training_loss(&batches, &oracle, &sched).unwrap().to_scalar::<f64>().unwrap();
    let zero_loss = training_loss(&batches, &ZeroModel, &sched).unwrap().to_scalar::<f64>().unwrap();
    let elements = (16 * 4 * 4 * 8 * 8) as f64;
    // Var(ε²) = 2 for standard normal ε.
    let zero_se = (2.0 / elements).sqrt();
    let zero_z = (zero_loss - 1.0).abs() / zero_se;
    let per = per_target_loss(&batches, &ZeroModel, &sched).unwrap();

    let elapsed = start.elapsed();
    let pass = endpoints
        && ok == checks
        && oracle_loss.abs() < tol::ORACLE_LOSS
        && zero_z < tol::MC_SE
        && per.dims() == [64]
        && elapsed < Duration::from_secs(tol::DIFFUSION_RUNTIME_S);
    verdict(
        4,
        "forward process moments and loss calibration",
        pass,
        &format!(
            "endpoints exact: {endpoints}, {ok}/{checks} moments within {} SE (worst {worst_z:.2}) over {} draws, \
             oracle loss {oracle_loss:.1e}, zero-model loss {zero_loss:.4} ({zero_z:.2} SE), {:.1}s",
            tol::MC_SE,
            tol::MC_DRAWS,
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 5

fn overfit_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.scenegen.objects = 2;
    cfg.scenegen.test_fraction = 0.0;
    cfg.scenegen.resolution = 32;
    cfg.scenegen.seed = 5;
    cfg.codec.resolution = 32;
    cfg.codec.widths = vec![16, 32, 32];
    cfg.codec.epochs = 200;
    cfg.codec.batch_size = 8;
    cfg.codec.learning_rate = 3e-3;
    cfg.unet.base_channels = 32;
    cfg.training.batch_size = tol::OVERFIT_SAMPLES;
    cfg.training.accum = 1;
    // One update per epoch: all samples fit in one batch.
    cfg.training.epochs = tol::MEMORIZE_STEPS;
    cfg.training.learning_rate = 1e-3;
    cfg.validate().unwrap();
    cfg
}

#[test]
fn criterion_5_overfit_and_memorize() {
    let _lock = serial();
    let start = Instant::now();
    let cfg = overfit_config();
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&cfg.scenegen, dir.path()).unwrap();
    let records: Vec<_> = manifest.split(Split::Train).take(tol::OVERFIT_SAMPLES).collect();
    assert_eq!(records.len(), tol::OVERFIT_SAMPLES);

    let images = codec::training_images(
        dir.path(),
        &DatasetManifest { records: records.iter().map(|r| (*r).clone()).collect(), ..manifest.clone() },
    )
    .unwrap();
    let codec = codec::train_codec_on(&images, &cfg.codec, |_, _| {}).unwrap();
    let samples = encode_records(&codec, dir.path(), &records).unwrap();

    let mut ps = ParamStore::new(DType::F32, 5);
    let net = UNet::new(&mut ps, &cfg.unet).unwrap();
    let sched = NoiseSchedule::from_config(&cfg.diffusion.schedule).unwrap();
    let before = probe_loss(&samples, &net, &sched, 55, 8).unwrap();
    let mut fit = Fit::new(&net, &ps, &sched, &cfg.training);
    while fit.step < tol::OVERFIT_STEPS {
        fit.run_epoch(&samples, &mut |_| Ok(())).unwrap();
    }
    let after = probe_loss(&samples, &net, &sched, 55, 8).unwrap();
    let steps = fit.step;
    while !fit.done() {
        fit.run_epoch(&samples, &mut |_| Ok(())).unwrap();
    }
    let memorize_steps = fit.step;

    let sampler = SamplerConfig { kind: SamplerKind::Ddim, steps: 50, eta: 0.0, seed: 5 };
    let mut psnrs = Vec::new();
    for (s, rec) in samples.iter().zip(&records).take(tol::MEMORIZED_TARGETS) {
        let cond = TargetCondition { z_src: &s.z_src, skeleton: &s.targets[0].skeleton, global: &s.global, camera: None };
        let z = sample_targets(&net, &[cond], &sampler, &sched).unwrap();
        let generated = codec.decode(&z[0]).unwrap().quantized();
        let view = skelguide::scenegen::load_sample(dir.path(), rec).unwrap();
        psnrs.push(metric_psnr(&generated, &view.targets[0].image, PSNR_CAP).unwrap());
    }
    let psnr = psnrs.iter().sum::<f64>() / psnrs.len() as f64;
    let codec_psnr = codec.training.final_train_psnr;

    let elapsed = start.elapsed();
    let ratio = after / before;
    let pass = steps <= tol::OVERFIT_STEPS
        && ratio < tol::OVERFIT_RATIO
        && psnr > tol::MEMORIZED_PSNR_DB
        && elapsed < Duration::from_secs(tol::OVERFIT_RUNTIME_S);
    verdict(
        5,
        "overfit harness and memorized DDIM sample",
        pass,
        &format!(
            "{} samples, fixed-noise loss {before:.4} -> {after:.4} (x{ratio:.3}, need < {}) in {steps} steps, \
             after {memorize_steps} steps DDIM PSNR over {} targets {psnr:.2} dB (need > {}; codec {codec_psnr:.2} dB), {:.0}s",
            tol::OVERFIT_SAMPLES,
            tol::OVERFIT_RATIO,
            psnrs.len(),
            tol::MEMORIZED_PSNR_DB,
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// Criteria 6 and 7

struct Desk {
    cfg: ExperimentConfig,
    manifest: DatasetManifest,
    scn: MetricReport,
    baseline: MetricReport,
    comparison: skelguide::evalkit::Comparison,
    quality: pipeline::SkeletonQuality,
    compute_seconds: f64,
}

const DESK_STAGES: [&str; 9] =
    ["data", "codec", "baseline", "scn", "baseline_samples", "scn_samples", "baseline_eval", "scn_eval", "compare"];

fn stage_seconds(root: &Path) -> f64 {
    DESK_STAGES
        .iter()
        .filter_map(|s| std::fs::read_to_string(root.join(s).join(pipeline::METADATA_FILE)).ok())
        .filter_map(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .filter_map(|v| v["elapsed_seconds"].as_f64())
        .sum()
}

fn run_desk(root: &Path) -> Desk {
    let cfg = desk_config();
    let done = root.join("compare").join(pipeline::COMPARISON_FILE);
    let reuse = std::env::var("SKELGUIDE_ACCEPTANCE_REUSE").is_ok_and(|v| v == "1") && done.exists();
    if !reuse {
        let _ = std::fs::remove_dir_all(root);
        let data = root.join("data");
        progress("desk: generating data");
        pipeline::gen_data(&cfg, &data).unwrap();
        progress("desk: training codec");
        pipeline::train_codec(&cfg, &data, &root.join("codec"), false).unwrap();
        let codec_path = root.join("codec").join(pipeline::CODEC_FILE);
        for mode in [Mode::Baseline, Mode::Scn] {
            progress(&format!("desk: training {}", mode.name()));
            let mut mcfg = cfg.clone();
            mcfg.unet.mode = mode;
            pipeline::train(&mcfg, &data, &codec_path, &root.join(mode.name()), &TrainOptions::default()).unwrap();
        }
        for mode in [Mode::Baseline, Mode::Scn] {
            progress(&format!("desk: sampling and evaluating {}", mode.name()));
            let ckpt = root.join(mode.name()).join(pipeline::DENOISER_FILE);
            let samples = root.join(format!("{}_samples", mode.name()));
            pipeline::sample(&cfg, &ckpt, &data, Split::Test, None, &samples).unwrap();
            pipeline::evaluate(&cfg, &samples, Some(&data), &root.join(format!("{}_eval", mode.name()))).unwrap();
        }
        pipeline::compare(&cfg, &root.join("scn_eval"), &root.join("baseline_eval"), &root.join("compare")).unwrap();
    }
    let scn = pipeline::load_report(&root.join("scn_eval")).unwrap();
    let baseline = pipeline::load_report(&root.join("baseline_eval")).unwrap();
    let comparison = serde_json::from_str(&std::fs::read_to_string(&done).unwrap()).unwrap();
    let quality = pipeline::skeleton_quality_from_reports(&cfg.evaluation, &scn, &baseline, &root.join("quality")).unwrap();
    Desk {
        manifest: DatasetManifest::load(&root.join("data")).unwrap(),
        cfg,
        scn,
        baseline,
        comparison,
        quality,
        compute_seconds: stage_seconds(root),
    }
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| run_desk(&Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-desk")))
}

#[test]
fn criterion_6_desk_experiment() {
    let _lock = serial();
    let d = desk();
    let res = d.cfg.scenegen.resolution;
    let sizes_ok = d.manifest.train_objects.len() >= tol::DESK_MIN_TRAIN_OBJECTS
        && d.manifest.test_objects.len() >= tol::DESK_MIN_TEST_OBJECTS
        && res == tol::DESK_RESOLUTION;
    let m = |metric: Metric| d.comparison.get(metric);
    let better = [Metric::L1, Metric::Psnr, Metric::Ssim].iter().all(|&k| {
        let c = m(k);
        if k.lower_is_better() {
            c.mean_ours < c.mean_reference
        } else {
            c.mean_ours > c.mean_reference
        }
    });
    let significant = [Metric::L1, Metric::Psnr].iter().all(|&k| m(k).p_value < tol::DESK_ALPHA);
    let budget_ok = d.compute_seconds <= tol::DESK_BUDGET_S;
    let detail = format!(
        "{} train / {} test objects at {res}px, {} targets; L1 {:.4} vs {:.4} (p {:.2e}), PSNR {:.2} vs {:.2} (p {:.2e}), \
         SSIM {:.4} vs {:.4} (p {:.2e}), LPIPS-proxy {:.4} vs {:.4}; compute {:.0} min",
        d.manifest.train_objects.len(),
        d.manifest.test_objects.len(),
        d.scn.samples.len(),
        m(Metric::L1).mean_ours,
        m(Metric::L1).mean_reference,
        m(Metric::L1).p_value,
        m(Metric::Psnr).mean_ours,
        m(Metric::Psnr).mean_reference,
        m(Metric::Psnr).p_value,
        m(Metric::Ssim).mean_ours,
        m(Metric::Ssim).mean_reference,
        m(Metric::Ssim).p_value,
        m(Metric::Lpips).mean_ours,
        m(Metric::Lpips).mean_reference,
        d.compute_seconds / 60.0,
    );
    verdict(6, "scn beats baseline on the desk experiment", sizes_ok && better && significant && budget_ok, &detail);
    assert_eq!(d.baseline.samples.len(), d.scn.samples.len());
}

#[test]
fn criterion_7_skeleton_quality_trend() {
    let _lock = serial();
    let d = desk();
    let levels = d.quality.degradation_levels.len();
    let mut pass = levels >= tol::TREND_MIN_LEVELS;
    let mut parts = vec![format!("{levels} degradation levels")];
    for t in &d.quality.trends {
        let rho = t.spearman.unwrap_or(f64::NAN);
        let ok = rho > 0.0 && t.top_minus_bottom > t.difference_se;
        // The claim is judged on the two metrics criterion 6 tests for significance.
        if matches!(t.metric, Metric::L1 | Metric::Psnr) {
            pass &= ok;
        }
        parts.push(format!(
            "{}: {} bins, spearman {rho:.2}, top-bottom {:.5} vs SE {:.5}",
            t.metric.name(),
            t.bins.len(),
            t.top_minus_bottom,
            t.difference_se
        ));
    }
    verdict(7, "improvement grows with skeleton IoU (L1, PSNR)", pass, &parts.join("; "));
}

// ---------------------------------------------------------------------------
// Criterion 8

#[test]
fn criterion_8_known_values() {
    let _lock = serial();
    let u = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0], Alternative::Less).unwrap();
    let u_ok = u.u == 0.0 && (u.p - 1.0 / 6.0).abs() < tol::KNOWN_VALUE;

    let d = [0.5, -1.25, 2.0];
    let eye = nalgebra::DMatrix::<f64>::identity(3, 3);
    let fd = frechet_distance(&nalgebra::DVector::zeros(3), &eye, &nalgebra::DVector::from_row_slice(&d), &eye);
    let d2: f64 = d.iter().map(|v| v * v).sum();
    let fd_ok = (fd - d2).abs() < tol::KNOWN_VALUE;

    let black = Image::filled(16, 16, 0.0);
    let white = Image::filled(16, 16, 1.0);
    let grey = Image::filled(16, 16, 0.5);
    let psnr0 = metric_psnr(&black, &white, PSNR_CAP).unwrap();
    let psnr6 = metric_psnr(&black, &grey, PSNR_CAP).unwrap();
    let psnr_ok = psnr0.abs() < tol::KNOWN_VALUE && (psnr6 - tol::PSNR_HALF_DB).abs() < tol::PSNR_DIGITS;

    let c1 = (0.01f64).powi(2);
    let ssim = metric_ssim(&black, &white).unwrap();
    let ssim_ok = (ssim - c1 / (1.0 + c1)).abs() < tol::KNOWN_VALUE;

    verdict(
        8,
        "metric and statistic known values",
        u_ok && fd_ok && psnr_ok && ssim_ok,
        &format!(
            "U {} p {:.10} (1/6); frechet {fd:.12} (|d|^2 {d2}); PSNR {psnr0:.6} and {psnr6:.6} dB; SSIM {ssim:.3e} (C1/(1+C1) {:.3e})",
            u.u,
            u.p,
            c1 / (1.0 + c1)
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 9

const TINY_CONFIG: &str = r#"
[scenegen]
objects = 4
frame_budget = 8
resolution = 32
test_fraction = 0.5

[scenegen.degradation]
test_levels = [0.0, 0.5, 1.0]

[codec]
resolution = 32
widths = [8, 8, 8]
epochs = 1
max_images = 16
global_dim = 8

[unet]
base_channels = 8
channel_mults = [1, 2]
groups = 4
attention_levels = [1]
global_dim = 8
global_tokens = 2

[training]
batch_size = 2
accum = 2
epochs = 2
learning_rate = 1e-3

[diffusion.sampler]
steps = 4

[evaluation]
bootstrap = 50
"#;

fn cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_skelguide")).args(args).output().expect("run skelguide");
    assert!(out.status.success(), "skelguide {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// SHA-256 of every file under `root` except the timestamp files.
fn tree_digest(root: &Path) -> BTreeMap<String, String> {
    use sha2::{Digest, Sha256};
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != pipeline::METADATA_FILE) {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, format!("{:x}", Sha256::digest(std::fs::read(&p).unwrap())));
            }
        }
    }
    out
}

/// The full command sequence; stage configs come from `config_for(stage)`.
fn run_pipeline(root: &Path, config_for: &dyn Fn(&str) -> PathBuf) {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let c = |s: &str| config_for(s).to_string_lossy().into_owned();
    cli(&["gen-data", "--config", &c("data"), "--out", &p("data")]);
    cli(&["train-codec", "--config", &c("codec"), "--data", &p("data"), "--out", &p("codec")]);
    let codec = p("codec/codec.ckpt");
    cli(&[
        "train",
        "--config",
        &c("baseline"),
        "--mode",
        "baseline",
        "--data",
        &p("data"),
        "--codec",
        &codec,
        "--out",
        &p("baseline"),
    ]);
    cli(&["train", "--config", &c("scn"), "--mode", "scn", "--data", &p("data"), "--codec", &codec, "--out", &p("scn")]);
    for m in ["baseline", "scn"] {
        let ckpt = p(&format!("{m}/denoiser.ckpt"));
        let s = format!("{m}_samples");
        cli(&["sample", "--config", &c(&s), "--denoiser", &ckpt, "--data", &p("data"), "--out", &p(&s)]);
        let e = format!("{m}_eval");
        cli(&["evaluate", "--config", &c(&e), "--generated", &p(&s), "--out", &p(&e)]);
    }
    cli(&[
        "compare",
        "--config",
        &c("compare"),
        "--ours",
        &p("scn_eval"),
        "--reference",
        &p("baseline_eval"),
        "--out",
        &p("compare"),
    ]);
    cli(&[
        "skeleton-quality",
        "--config",
        &c("quality"),
        "--ours",
        &p("scn/denoiser.ckpt"),
        "--reference",
        &p("baseline/denoiser.ckpt"),
        "--data",
        &p("data"),
        "--out",
        &p("quality"),
    ]);
}

#[test]
fn criterion_9_determinism() {
    let _lock = serial();
    let start = Instant::now();
    let work = tempfile::tempdir().unwrap();
    let root = work.path().join("run");
    let cfg_path = work.path().join("tiny.toml");
    std::fs::write(&cfg_path, TINY_CONFIG).unwrap();
    run_pipeline(&root, &|_| cfg_path.clone());
    let first = tree_digest(&root);

    // Keep each stage's snapshot, delete everything, and rerun from the snapshots.
    let snaps = work.path().join("snapshots");
    std::fs::create_dir_all(&snaps).unwrap();
    let stages: Vec<String> =
        std::fs::read_dir(&root).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    for s in &stages {
        std::fs::copy(root.join(s).join("config.toml"), snaps.join(format!("{s}.toml"))).unwrap();
    }
    std::fs::remove_dir_all(&root).unwrap();
    run_pipeline(&root, &|s| snaps.join(format!("{s}.toml")));
    let second = tree_digest(&root);

    let differing: Vec<&String> = first.keys().filter(|k| second.get(*k) != first.get(*k)).collect();
    let pass = first.len() == second.len() && differing.is_empty() && first.keys().any(|k| k.ends_with(".ckpt"));
    verdict(
        9,
        "gen-data, train, DDIM sampling and reports reproduce byte-for-byte",
        pass,
        &format!(
            "{} files across {} stages compared, {} differ{}, {:.0}s",
            first.len(),
            stages.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(" (first: {})", differing[0]) },
            start.elapsed().as_secs_f64()
        ),
    );
}
