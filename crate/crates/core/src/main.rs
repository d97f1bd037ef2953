use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use skelguide::config::ExperimentConfig;
use skelguide::pipeline::{self, TrainOptions};
use skelguide::scenegen::Split;
use skelguide::unet::Mode;
use skelguide::{Error, Result};

/// Skeleton-guided novel view synthesis at desk scale.
#[derive(Parser, Debug)]
#[command(name = "skelguide", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment configuration (TOML); defaults are used for absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Compute device; only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    /// Progress on stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the procedural dataset.
    GenData,
    /// Train the image codec on a dataset.
    TrainCodec {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a denoiser with a frozen codec.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        /// Overrides `unet.mode` (baseline, scn, scn+rcn, rcn).
        #[arg(long)]
        mode: Option<Mode>,
        /// Start from another denoiser's weights; new parameters keep their init.
        #[arg(long, conflicts_with = "resume")]
        warm_start: Option<PathBuf>,
        /// Continue from a checkpoint of this run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate target views and panels.
    Sample {
        #[arg(long)]
        denoiser: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// At most this many source views.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score generated views against their targets.
    Evaluate {
        /// Output directory of `sample`.
        #[arg(long)]
        generated: PathBuf,
        /// Dataset root; defaults to the one recorded at sampling time.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// One-sided per-metric tests of two evaluation reports.
    Compare {
        #[arg(long)]
        ours: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Improvement over a reference model as a function of skeleton IoU.
    SkeletonQuality {
        #[arg(long)]
        ours: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Print the effective configuration as TOML.
    PrintConfig,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    if common.device != "cpu" {
        return Err(Error::Config(format!("device {:?} is not available; use cpu", common.device)));
    }
    let cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    Ok(match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn out_dir(common: &Common) -> Result<&Path> {
    common.out.as_deref().ok_or_else(|| Error::Config("--out is required".into()))
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(Error::Config(format!("unknown split {s:?}"))),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let c = &cli.common;
    match cli.command {
        Command::PrintConfig => print!("{}", cfg.to_toml()?),
        Command::GenData => {
            let m = pipeline::gen_data(&cfg, out_dir(c)?)?;
            println!(
                "{} samples ({} train objects, {} test objects)",
                m.records.len(),
                m.train_objects.len(),
                m.test_objects.len()
            );
        }
        Command::TrainCodec { data } => {
            let codec = pipeline::train_codec(&cfg, &data, out_dir(c)?, c.verbose)?;
            println!("codec train psnr {:.2} dB", codec.training.final_train_psnr);
        }
        Command::Train { data, codec, mode, warm_start, resume } => {
            if let Some(m) = mode {
                cfg.unet.mode = m;
                cfg.validate()?;
            }
            let opts = TrainOptions { warm_start, resume, verbose: c.verbose };
            let den = pipeline::train(&cfg, &data, &codec, out_dir(c)?, &opts)?;
            println!("{} steps, final loss {:.6}", den.meta.training.steps, den.meta.training.last_loss);
        }
        Command::Sample { denoiser, data, split, limit } => {
            let index = pipeline::sample(&cfg, &denoiser, &data, parse_split(&split)?, limit, out_dir(c)?)?;
            println!("{} views generated", index.entries.len());
        }
        Command::Evaluate { generated, data } => {
            let r = pipeline::evaluate(&cfg, &generated, data.as_deref(), out_dir(c)?)?;
            for (k, v) in &r.summary.means {
                println!("{k}: {v:.4}");
            }
            println!("fid_proxy: {:.4}", r.fid_proxy);
        }
        Command::Compare { ours, reference } => {
            let out = out_dir(c)?;
            pipeline::compare(&cfg, &ours, &reference, out)?;
            print!("{}", std::fs::read_to_string(out.join("comparison.md")).map_err(|e| Error::io(out, e))?);
        }
        Command::SkeletonQuality { ours, reference, data, limit } => {
            let q = pipeline::skeleton_quality(&cfg, &ours, &reference, &data, limit, out_dir(c)?)?;
            for t in &q.trends {
                let rho = t.spearman.map_or("n/a".to_string(), |r| format!("{r:.3}"));
                println!("{}: spearman {rho}, top-bottom {:.5} ± {:.5}", t.metric.name(), t.top_minus_bottom, t.difference_se);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    skelguide::tune_allocator();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { 1 } else { 0 };
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
