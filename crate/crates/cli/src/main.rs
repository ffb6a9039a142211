use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dni_core::analysis::{model_corr, FilterPolicy};
use dni_core::checkpoint;
use dni_core::harness::{self, StudyConfig, StudyStore};
use dni_core::imaging::{self, add_noise, psnr, NoiseModel};
use dni_core::interpolator::{interp_n, InterpolationRecipe};
use dni_core::netgraph::fold_bn;
use dni_core::trainer::{self, Dataset, LogRecord, TrainConfig, TrainObserver, TrainOutcome};
use dni_core::{ArchSpec, ParamSet};

#[derive(Parser)]
#[command(name = "dni", version, about = "Deep network interpolation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct TrainOpts {
    /// Training image manifest (one path per line).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 40)]
    patch: usize,
    /// Learning rate (fine-tuning uses a tenth of it).
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    /// Append `iter,loss,lr` lines here instead of stderr.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from scratch.
    Train {
        #[arg(long)]
        arch: String,
        /// Noise level, or several (comma separated) for mixed training.
        #[arg(long, value_delimiter = ',', required = true)]
        sigma: Vec<f32>,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Fine-tune an existing checkpoint to another noise level.
    Finetune {
        #[arg(long)]
        from: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        sigma: Vec<f32>,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Interpolate checkpoints with convex coefficients.
    Interp {
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean test PSNR of interp(a, b, alpha) over an alpha grid.
    Sweep {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        step: f64,
        #[arg(long, value_delimiter = ',', required = true)]
        sigma: Vec<f32>,
        #[arg(long)]
        test: PathBuf,
        /// Seed of the test noise fields.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Filter correlation of models against a reference on one layer.
    Correlate {
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<PathBuf>,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        layer: String,
        #[arg(long, value_enum, default_value_t = Policy::Positionwise)]
        policy: Policy,
        #[arg(long)]
        out: PathBuf,
    },
    /// Denoise one image.
    Denoise {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
    },
    /// Add seeded Gaussian noise to an image.
    Noise {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        sigma: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fold batch norm into the preceding convolutions.
    FoldBn {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a study from a JSON config.
    Study {
        #[arg(value_enum)]
        kind: StudyKind,
        #[arg(long)]
        config: PathBuf,
    },
    /// PSNR between two images.
    Psnr {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Positionwise,
    First,
}

#[derive(Clone, Copy, ValueEnum)]
enum StudyKind {
    UnseenNoise,
    Correlation,
}

/// Creation timestamp for new checkpoints: `SOURCE_DATE_EPOCH` when set,
/// otherwise the current time.
fn created_now() -> String {
    let epoch = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse::<i64>().ok())
        .and_then(|s| chrono::DateTime::from_timestamp(s, 0));
    let t = epoch.unwrap_or_else(chrono::Utc::now);
    t.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn load(path: &Path) -> Result<ParamSet> {
    checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn save(p: &ParamSet, path: &Path) -> Result<String> {
    checkpoint::save(p, path).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

struct LineLog(Option<fs::File>);

impl TrainObserver for LineLog {
    fn log(&mut self, record: &LogRecord) {
        use std::io::Write;
        match &mut self.0 {
            Some(f) => {
                let _ = writeln!(f, "{record}");
            }
            None => eprintln!("{record}"),
        }
    }
}

impl LineLog {
    fn open(path: Option<&Path>) -> Result<Self> {
        let file = path
            .map(|p| {
                fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .with_context(|| format!("opening {}", p.display()))
            })
            .transpose()?;
        Ok(Self(file))
    }
}

fn train_config(sigma: Vec<f32>, o: &TrainOpts) -> TrainConfig {
    TrainConfig {
        batch_size: o.batch,
        patch_size: o.patch,
        learning_rate: o.lr,
        log_every: o.log_every,
        created_iso8601: created_now(),
        ..TrainConfig::new(sigma, o.iters, o.seed)
    }
}

fn finish_training(outcome: TrainOutcome, out: &Path) -> Result<()> {
    save(&outcome.params, out)?;
    println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { arch, sigma, opts } => {
            let spec = ArchSpec::from_id(&arch)?;
            let data = Dataset::from_manifest(&opts.data)?;
            let cfg = train_config(sigma, &opts);
            let mut log = LineLog::open(opts.log.as_deref())?;
            let outcome = trainer::train_observed(&spec, &cfg, &data, &mut log)?;
            finish_training(outcome, &opts.out)?;
        }
        Command::Finetune { from, sigma, opts } => {
            let base = load(&from)?;
            let spec = harness::spec_of(&base)?;
            let data = Dataset::from_manifest(&opts.data)?;
            let cfg = train_config(sigma, &opts);
            let mut log = LineLog::open(opts.log.as_deref())?;
            let outcome = trainer::finetune_observed(&spec, &base, &cfg, &data, &mut log)?;
            finish_training(outcome, &opts.out)?;
        }
        Command::Interp { models, alphas, out } => {
            if models.len() != alphas.len() {
                bail!("{} models but {} alphas", models.len(), alphas.len());
            }
            let loaded = models.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
            let recipe = InterpolationRecipe::new(loaded.iter().zip(alphas).collect())?;
            let result = interp_n(&recipe)?;
            for w in &result.warnings {
                eprintln!("warning: {w}");
            }
            let sum = save(&result.params, &out)?;
            println!("{sum}");
        }
        Command::Sweep {
            a,
            b,
            step,
            sigma,
            test,
            seed,
            out,
        } => {
            let (a, b) = (load(&a)?, load(&b)?);
            let images = imaging::load_manifest(&test)?;
            let r = harness::sweep(&a, &b, step, &images, &sigma, seed)?;
            for l in &r.levels {
                println!(
                    "sigma {}: best alpha {} ({:.2} dB), pixel interp {:.2} dB, input {:.2} dB",
                    l.sigma, l.best_alpha, l.best_psnr, l.pixel_best_psnr, l.input_psnr
                );
            }
            write_json(&r, &out)?;
        }
        Command::Correlate {
            models,
            reference,
            layer,
            policy,
            out,
        } => {
            let reference = load(&reference)?;
            let policy = match policy {
                Policy::Positionwise => FilterPolicy::Positionwise,
                Policy::First => FilterPolicy::first_filter(),
            };
            let mut reports = Vec::new();
            for path in &models {
                let r = model_corr(&load(path)?, &reference, &layer, policy)?;
                println!(
                    "{}: median {:.4} (q10 {:.4}, q90 {:.4}, {} constant skipped)",
                    path.display(),
                    r.median,
                    r.quantiles.q10,
                    r.quantiles.q90,
                    r.skipped_constant
                );
                reports.push(r);
            }
            write_json(&reports, &out)?;
        }
        Command::Denoise {
            model,
            input,
            out,
            reference,
        } => {
            let m = load(&model)?;
            if let Some(db) = harness::denoise_file(&m, &input, &out, reference.as_deref())? {
                println!("PSNR {db:.4} dB");
            }
        }
        Command::Noise {
            input,
            sigma,
            seed,
            out,
        } => {
            if sigma.is_nan() || sigma < 0.0 {
                bail!("sigma must be >= 0");
            }
            let img = imaging::load_image(&input)?;
            imaging::save_image(&add_noise(&img, NoiseModel { sigma, seed }), &out)?;
        }
        Command::FoldBn { input, out } => {
            let p = load(&input)?;
            let spec = harness::spec_of(&p)?;
            let (_, folded) = fold_bn(&spec, &p)?;
            println!("{}", save(&folded, &out)?);
        }
        Command::Study { kind, config } => {
            let cfg = StudyConfig::load(&config)?;
            let mut store = StudyStore::new(cfg)?;
            match kind {
                StudyKind::UnseenNoise => {
                    let r = harness::run_unseen_noise_study(&mut store)?;
                    print!("{}", r.to_table());
                }
                StudyKind::Correlation => {
                    let r = harness::run_correlation_study(&mut store)?;
                    for l in &r.layers {
                        let curve: Vec<String> =
                            l.curve.iter().map(|p| format!("N{}={:.3}", p.sigma, p.median)).collect();
                        println!(
                            "{}: {} | scratch pair {:.3} | fitted alpha {:?}",
                            l.layer,
                            curve.join(" "),
                            l.scratch_pair_median,
                            l.fitted_alpha
                        );
                    }
                }
            }
        }
        Command::Psnr { reference, test } => {
            let r = imaging::load_image(&reference)?;
            let t = imaging::load_image(&test)?;
            let db = psnr(&r, &t)?;
            if db.is_infinite() {
                println!("inf");
            } else {
                println!("{db:.4}");
            }
        }
    }
    Ok(())
}
