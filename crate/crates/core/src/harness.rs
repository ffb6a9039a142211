//! Experiment driver: denoising with a checkpoint, alpha sweeps over
//! interpolated models, the unseen-noise study and the filter-correlation
//! study, plus their text/JSON reports.
//!
//! Both studies share one checkpoint store under the configured output
//! directory. A stage whose checkpoint and stage config already exist is
//! loaded instead of retrained, so an interrupted study resumes where it
//! stopped.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, fit_alpha_curve, model_corr, AnalysisError, CorrelationReport, FilterPolicy};
use crate::checkpoint::{self, CheckpointError, ParamSet};
use crate::imaging::{self, add_noise, psnr, Image, ImageError, NoiseModel};
use crate::interpolator::{interp2, pixel_interp, InterpError};
use crate::netgraph::{forward, ArchSpec, GraphError, Mode};
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use crate::trainer::{
    finetune_observed, train_observed, Dataset, LogRecord, StepDecay, TrainConfig, TrainError,
    TrainObserver, PIXEL_SCALE,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("alpha grid step {0} does not divide 1")]
    GridStep(f64),
    #[error("invalid study config: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<HarnessError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("test set is empty")]
    EmptyTestSet,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Interp(#[from] InterpError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn staged<T>(stage: &str, r: Result<T, HarnessError>) -> Result<T, HarnessError> {
    r.map_err(|e| HarnessError::Stage {
        stage: stage.to_string(),
        source: Box::new(e),
    })
}

/// Worker threads for sweeps and per-image evaluation: `DNI_THREADS`, with
/// 0 or unset meaning one per available core.
pub fn thread_count() -> usize {
    std::env::var("DNI_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
    let pool = POOL.get_or_init(|| {
        let n = thread_count();
        (n > 1)
            .then(|| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok())
            .flatten()
    });
    match pool {
        Some(p) => p.install(|| items.par_iter().map(&f).collect()),
        None => items.iter().map(f).collect(),
    }
}

/// Architecture of a checkpoint: its embedded block, else its canonical id.
pub fn spec_of(params: &ParamSet) -> Result<ArchSpec, HarnessError> {
    match &params.arch {
        Some(a) => Ok(a.clone()),
        None => Ok(ArchSpec::from_id(&params.arch_id)?),
    }
}

/// Eval-mode denoising of one 0..255 image. The output is not clamped.
pub fn denoise_image(spec: &ArchSpec, params: &ParamSet, noisy: &Image) -> Result<Image, HarnessError> {
    let x = noisy.tensor().map(|v| v / PIXEL_SCALE);
    let (y, _) = forward(spec, params, &x, Mode::Eval)?;
    Ok(Image::from_tensor(y.map(|v| v * PIXEL_SCALE))?)
}

/// Denoises `input` into `output` (clamped 8-bit). With a reference image,
/// returns the PSNR of the written result against it.
pub fn denoise_file(
    params: &ParamSet,
    input: &Path,
    output: &Path,
    reference: Option<&Path>,
) -> Result<Option<f64>, HarnessError> {
    let spec = spec_of(params)?;
    let noisy = imaging::load_image(input)?;
    let out = denoise_image(&spec, params, &noisy)?.clamped();
    imaging::save_image(&out, output)?;
    let written = Image::from_gray8(out.width(), out.height(), &out.to_gray8())?;
    reference
        .map(|r| Ok(psnr(&imaging::load_image(r)?, &written)?))
        .transpose()
}

/// Clean test images with their noisy versions at one level. Image `i`
/// uses noise seed `derive_seed(derive_seed(seed, sigma), i)`.
#[derive(Debug, Clone)]
pub struct NoisyTestSet {
    pub sigma: f32,
    pub clean: Vec<Image>,
    pub noisy: Vec<Image>,
}

impl NoisyTestSet {
    pub fn new(clean: &[Image], sigma: f32, seed: u64) -> Result<Self, HarnessError> {
        if clean.is_empty() {
            return Err(HarnessError::EmptyTestSet);
        }
        let level_seed = derive_seed(seed, sigma.to_bits() as u64);
        let noisy = clean
            .iter()
            .enumerate()
            .map(|(i, img)| {
                add_noise(
                    img,
                    NoiseModel {
                        sigma,
                        seed: derive_seed(level_seed, i as u64),
                    },
                )
            })
            .collect();
        Ok(Self {
            sigma,
            clean: clean.to_vec(),
            noisy,
        })
    }

    /// Mean PSNR of the noisy inputs themselves (clamped).
    pub fn input_psnr(&self) -> Result<f64, HarnessError> {
        let vals = self
            .clean
            .iter()
            .zip(&self.noisy)
            .map(|(c, n)| psnr(c, &n.clamped()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(mean(&vals))
    }

    /// Clamped outputs of one model for every noisy image.
    pub fn outputs(&self, spec: &ArchSpec, params: &ParamSet) -> Result<Vec<Image>, HarnessError> {
        par_map(&self.noisy, |n| denoise_image(spec, params, n).map(|o| o.clamped()))
            .into_iter()
            .collect()
    }

    pub fn mean_psnr_of(&self, outputs: &[Image]) -> Result<f64, HarnessError> {
        let vals = self
            .clean
            .iter()
            .zip(outputs)
            .map(|(c, o)| psnr(c, o))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(mean(&vals))
    }

    pub fn evaluate(&self, spec: &ArchSpec, params: &ParamSet) -> Result<f64, HarnessError> {
        self.mean_psnr_of(&self.outputs(spec, params)?)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `0, step, 2 step, ..., 1`, with every point computed as `k / m`.
pub fn alpha_grid(step: f64) -> Result<Vec<f64>, HarnessError> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(HarnessError::GridStep(step));
    }
    let m = (1.0 / step).round();
    if (m * step - 1.0).abs() > 1e-9 {
        return Err(HarnessError::GridStep(step));
    }
    let m = m as usize;
    Ok((0..=m).map(|k| k as f64 / m as f64).collect())
}

/// Highest score; ties go to the larger alpha.
fn best_point(points: &[(f64, f64)]) -> (f64, f64) {
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for &(a, s) in points {
        if s > best.1 || (s == best.1 && a > best.0) {
            best = (a, s);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSweep {
    pub sigma: f32,
    /// `(alpha, mean PSNR)` of the interpolated models, alpha ascending.
    pub points: Vec<(f64, f64)>,
    pub best_alpha: f64,
    pub best_psnr: f64,
    /// Same grid applied to the two endpoint models' output images.
    pub pixel_points: Vec<(f64, f64)>,
    pub pixel_best_alpha: f64,
    pub pixel_best_psnr: f64,
    pub input_psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub model_a: String,
    pub model_b: String,
    pub alpha_grid: Vec<f64>,
    pub levels: Vec<LevelSweep>,
}

impl SweepResult {
    pub fn level(&self, sigma: f32) -> Option<&LevelSweep> {
        self.levels.iter().find(|l| l.sigma == sigma)
    }
}

/// Evaluates `interp2(a, b, alpha)` for every alpha on the grid at one
/// noise level; also scores pixel interpolation of the endpoint outputs.
pub fn sweep_level(
    a: &ParamSet,
    b: &ParamSet,
    grid: &[f64],
    tests: &NoisyTestSet,
) -> Result<LevelSweep, HarnessError> {
    let spec = spec_of(a)?;
    let models = grid
        .iter()
        .map(|&alpha| Ok(interp2(a, b, alpha)?.params))
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let points = par_map(&models, |m| tests.evaluate(&spec, m))
        .into_iter()
        .zip(grid)
        .map(|(r, &alpha)| r.map(|p| (alpha, p)))
        .collect::<Result<Vec<_>, _>>()?;

    let out_a = tests.outputs(&spec, a)?;
    let out_b = tests.outputs(&spec, b)?;
    let pixel_points = grid
        .iter()
        .map(|&alpha| {
            let mixed = out_a
                .iter()
                .zip(&out_b)
                .map(|(x, y)| {
                    let t = pixel_interp(&[x.tensor().clone(), y.tensor().clone()], &[alpha, 1.0 - alpha])?;
                    Ok(Image::from_tensor(t)?)
                })
                .collect::<Result<Vec<_>, HarnessError>>()?;
            Ok((alpha, tests.mean_psnr_of(&mixed)?))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;

    let (best_alpha, best_psnr) = best_point(&points);
    let (pixel_best_alpha, pixel_best_psnr) = best_point(&pixel_points);
    Ok(LevelSweep {
        sigma: tests.sigma,
        points,
        best_alpha,
        best_psnr,
        pixel_points,
        pixel_best_alpha,
        pixel_best_psnr,
        input_psnr: tests.input_psnr()?,
    })
}

/// Sweeps the grid `0:step:1` at each noise level over `test_images`.
pub fn sweep(
    a: &ParamSet,
    b: &ParamSet,
    grid_step: f64,
    test_images: &[Image],
    sigmas: &[f32],
    noise_seed: u64,
) -> Result<SweepResult, HarnessError> {
    let grid = alpha_grid(grid_step)?;
    let levels = sigmas
        .iter()
        .map(|&s| sweep_level(a, b, &grid, &NoisyTestSet::new(test_images, s, noise_seed)?))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SweepResult {
        model_a: a.checksum(),
        model_b: b.checksum(),
        alpha_grid: grid,
        levels,
    })
}

// ---------------------------------------------------------------------------
// Studies

fn default_levels() -> Vec<f32> {
    vec![20.0, 30.0, 40.0, 50.0, 60.0]
}

fn default_grid_step() -> f64 {
    0.1
}

fn default_log_every() -> usize {
    100
}

fn default_created() -> String {
    checkpoint::EPOCH_ISO8601.to_string()
}

/// Shared configuration of the unseen-noise and correlation studies.
/// Relative paths are resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub arch: String,
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default = "default_levels")]
    pub levels: Vec<f32>,
    pub base_sigma: f32,
    pub target_sigma: f32,
    pub scratch_iterations: usize,
    pub finetune_iterations: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub lr_decay: Option<StepDecay>,
    #[serde(default)]
    pub augment: bool,
    pub seed: u64,
    pub test_seed: u64,
    #[serde(default = "default_grid_step")]
    pub grid_step: f64,
    /// Levels that also get a model trained directly on their data.
    #[serde(default)]
    pub upper_bound_levels: Vec<f32>,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default = "default_created")]
    pub created_iso8601: String,
}

impl StudyConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: StudyConfig = serde_json::from_str(&text).map_err(|source| HarnessError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let dir = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.train_manifest, &mut cfg.test_manifest, &mut cfg.out_dir] {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        ArchSpec::from_id(&self.arch)?;
        alpha_grid(self.grid_step)?;
        for s in [self.base_sigma, self.target_sigma] {
            if !self.levels.contains(&s) {
                return bad(format!("endpoint level {s} is not in levels"));
            }
        }
        if self.base_sigma == self.target_sigma {
            return bad("base and target levels must differ".into());
        }
        for s in &self.upper_bound_levels {
            if !self.levels.contains(s) {
                return bad(format!("upper-bound level {s} is not in levels"));
            }
        }
        self.stage_config(vec![self.base_sigma], 0, self.scratch_iterations)
            .validate()?;
        Ok(())
    }

    pub fn spec(&self) -> Result<ArchSpec, HarnessError> {
        Ok(ArchSpec::from_id(&self.arch)?)
    }

    fn stage_config(&self, sigmas: Vec<f32>, seed_index: u64, iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            batch_size: self.batch_size,
            patch_size: self.patch_size,
            learning_rate: self.learning_rate,
            optimizer: Default::default(),
            lr_decay: self.lr_decay,
            seed: derive_seed(self.seed, seed_index),
            noise_sigmas: sigmas,
            augment: self.augment,
            log_every: self.log_every,
            checkpoint_every: None,
            created_iso8601: self.created_iso8601.clone(),
        }
    }

    fn unseen(&self, sigma: f32) -> bool {
        sigma != self.base_sigma && sigma != self.target_sigma
    }

    fn level_index(&self, sigma: f32) -> u64 {
        self.levels.iter().position(|&s| s == sigma).unwrap_or(0) as u64
    }
}

fn level_name(sigma: f32) -> String {
    format!("n{sigma}")
}

/// Which model a stage produces.
#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    /// Scratch model at the base level.
    Base,
    /// Second scratch model at the base level (correlation control).
    Control,
    /// Scratch model on both endpoint levels.
    Baseline,
    /// Fine-tuned from the base model to a level.
    Finetune(f32),
    /// Scratch model at a level.
    UpperBound(f32),
}

impl Stage {
    pub fn name(&self) -> String {
        match self {
            Stage::Base => "base".into(),
            Stage::Control => "control".into(),
            Stage::Baseline => "baseline".into(),
            Stage::Finetune(s) => format!("finetune-{}", level_name(*s)),
            Stage::UpperBound(s) => format!("upper-{}", level_name(*s)),
        }
    }
}

/// Log file writer for one training stage.
struct StageLog(String);

impl TrainObserver for StageLog {
    fn log(&mut self, record: &LogRecord) {
        let _ = writeln!(self.0, "{record}");
    }
}

/// Checkpoint store of a study: trains stages on demand, reuses finished
/// ones.
pub struct StudyStore {
    cfg: StudyConfig,
    spec: ArchSpec,
    data: OnceLock<Dataset>,
    loaded: BTreeMap<String, ParamSet>,
}

impl StudyStore {
    pub fn new(cfg: StudyConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let spec = cfg.spec()?;
        for sub in ["checkpoints", "logs"] {
            let d = cfg.out_dir.join(sub);
            fs::create_dir_all(&d).map_err(io_err(&d))?;
        }
        Ok(Self {
            cfg,
            spec,
            data: OnceLock::new(),
            loaded: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &StudyConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn checkpoint_path(&self, stage: &Stage) -> PathBuf {
        self.cfg.out_dir.join("checkpoints").join(format!("{}.dnic", stage.name()))
    }

    fn dataset(&self) -> Result<&Dataset, HarnessError> {
        if let Some(d) = self.data.get() {
            return Ok(d);
        }
        let d = Dataset::from_manifest(&self.cfg.train_manifest)?;
        Ok(self.data.get_or_init(|| d))
    }

    fn train_config(&self, stage: &Stage) -> TrainConfig {
        let c = &self.cfg;
        match stage {
            Stage::Base => c.stage_config(vec![c.base_sigma], 1, c.scratch_iterations),
            Stage::Control => c.stage_config(vec![c.base_sigma], 2, c.scratch_iterations),
            Stage::Baseline => {
                c.stage_config(vec![c.base_sigma, c.target_sigma], 3, c.scratch_iterations)
            }
            Stage::Finetune(s) => c.stage_config(vec![*s], 10 + c.level_index(*s), c.finetune_iterations),
            Stage::UpperBound(s) => c.stage_config(vec![*s], 100 + c.level_index(*s), c.scratch_iterations),
        }
    }

    /// Returns the stage's model, training it (and its parent) if needed.
    pub fn get(&mut self, stage: &Stage) -> Result<ParamSet, HarnessError> {
        let name = stage.name();
        if let Some(p) = self.loaded.get(&name) {
            return Ok(p.clone());
        }
        let parent = match stage {
            Stage::Finetune(_) => Some(self.get(&Stage::Base)?),
            _ => None,
        };
        let p = staged(&name, self.load_or_train(stage, parent.as_ref()))?;
        self.loaded.insert(name, p.clone());
        Ok(p)
    }

    fn load_or_train(&self, stage: &Stage, parent: Option<&ParamSet>) -> Result<ParamSet, HarnessError> {
        let name = stage.name();
        let ck = self.checkpoint_path(stage);
        let cfg_path = self.cfg.out_dir.join("logs").join(format!("{name}.config.json"));
        let tc = self.train_config(stage);
        let stage_record = serde_json::json!({
            "arch": self.spec.arch_id,
            "train": tc,
            "parent": parent.map(|p| p.checksum()),
        });
        let record_text = serde_json::to_string_pretty(&stage_record).expect("serializable") + "\n";

        if ck.exists() && fs::read_to_string(&cfg_path).ok().as_deref() == Some(record_text.as_str()) {
            if let Ok(p) = checkpoint::load(&ck) {
                return Ok(p);
            }
        }

        eprintln!("[study] training stage {name} ({} iterations)", tc.iterations);
        let data = self.dataset()?;
        let mut log = StageLog(String::from("iter,loss,lr\n"));
        let outcome = match parent {
            Some(base) => finetune_observed(&self.spec, base, &tc, data, &mut log)?,
            None => train_observed(&self.spec, &tc, data, &mut log)?,
        };
        let logs = self.cfg.out_dir.join("logs");
        write_file(&logs.join(format!("{name}.log")), &log.0)?;
        write_json(&logs.join(format!("{name}.summary.json")), &outcome.summary)?;
        checkpoint::save(&outcome.params, &ck)?;
        write_file(&cfg_path, &record_text)?;
        Ok(outcome.params)
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    write_file(path, &text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub sigma: f32,
    pub unseen: bool,
    pub input_psnr: f64,
    pub upper_bound_psnr: Option<f64>,
    pub baseline_psnr: f64,
    pub dni_psnr: f64,
    pub dni_alpha: f64,
    pub pixel_interp_psnr: f64,
    pub pixel_interp_alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub arch: String,
    pub with_bn: bool,
    pub base_sigma: f32,
    pub target_sigma: f32,
    pub alpha_grid: Vec<f64>,
    pub rows: Vec<StudyRow>,
    pub checksums: BTreeMap<String, String>,
}

impl StudyReport {
    pub fn row(&self, sigma: f32) -> Option<&StudyRow> {
        self.rows.iter().find(|r| r.sigma == sigma)
    }

    /// Aligned text table, one column per level; unseen levels starred.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let bn = if self.with_bn { "w/ BN" } else { "w/o BN" };
        let _ = writeln!(out, "Mean PSNR (dB), {} ({bn})", self.arch);
        let _ = write!(out, "{:<14}", "Noise level");
        for r in &self.rows {
            let label = format!("N{}{}", r.sigma, if r.unseen { "*" } else { "" });
            let _ = write!(out, "{label:>9}");
        }
        out.push('\n');
        let line = |out: &mut String, name: &str, f: &dyn Fn(&StudyRow) -> Option<f64>, prec: usize| {
            let _ = write!(out, "{name:<14}");
            for r in &self.rows {
                match f(r) {
                    Some(v) => {
                        let _ = write!(out, "{:>9.*}", prec, v);
                    }
                    None => {
                        let _ = write!(out, "{:>9}", "-");
                    }
                }
            }
            out.push('\n');
        };
        line(&mut out, "Noisy input", &|r| Some(r.input_psnr), 2);
        line(&mut out, "Upper bound", &|r| r.upper_bound_psnr, 2);
        line(&mut out, "Baseline", &|r| Some(r.baseline_psnr), 2);
        line(&mut out, "Pixel interp", &|r| Some(r.pixel_interp_psnr), 2);
        line(&mut out, "DNI", &|r| Some(r.dni_psnr), 2);
        line(&mut out, "alpha", &|r| Some(r.dni_alpha), 2);
        out
    }
}

/// Trains (or reuses) the base, fine-tuned target, mixed baseline and
/// upper-bound models, sweeps alpha at every level and writes
/// `unseen_noise.{json,txt}` and `sweep.json` into the output directory.
pub fn run_unseen_noise_study(store: &mut StudyStore) -> Result<StudyReport, HarnessError> {
    let cfg = store.config().clone();
    let spec = store.spec().clone();
    let base = store.get(&Stage::Base)?;
    let target = store.get(&Stage::Finetune(cfg.target_sigma))?;
    let baseline = store.get(&Stage::Baseline)?;
    let mut uppers = BTreeMap::new();
    for &s in &cfg.upper_bound_levels {
        uppers.insert(level_name(s), store.get(&Stage::UpperBound(s))?);
    }

    let test = staged("load-test-set", imaging::load_manifest(&cfg.test_manifest).map_err(Into::into))?;
    let grid = alpha_grid(cfg.grid_step)?;
    let mut rows = Vec::new();
    let mut levels = Vec::new();
    for &sigma in &cfg.levels {
        let stage = format!("evaluate-{}", level_name(sigma));
        let (row, level) = staged(&stage, (|| {
            let tests = NoisyTestSet::new(&test, sigma, cfg.test_seed)?;
            let level = sweep_level(&base, &target, &grid, &tests)?;
            let upper_bound_psnr = uppers
                .get(&level_name(sigma))
                .map(|m| tests.evaluate(&spec, m))
                .transpose()?;
            let row = StudyRow {
                sigma,
                unseen: cfg.unseen(sigma),
                input_psnr: level.input_psnr,
                upper_bound_psnr,
                baseline_psnr: tests.evaluate(&spec, &baseline)?,
                dni_psnr: level.best_psnr,
                dni_alpha: level.best_alpha,
                pixel_interp_psnr: level.pixel_best_psnr,
                pixel_interp_alpha: level.pixel_best_alpha,
            };
            Ok((row, level))
        })())?;
        rows.push(row);
        levels.push(level);
    }

    let mut checksums = BTreeMap::new();
    checksums.insert(Stage::Base.name(), base.checksum());
    checksums.insert(Stage::Finetune(cfg.target_sigma).name(), target.checksum());
    checksums.insert(Stage::Baseline.name(), baseline.checksum());
    for (k, m) in &uppers {
        checksums.insert(format!("upper-{k}"), m.checksum());
    }
    let report = StudyReport {
        arch: spec.arch_id.clone(),
        with_bn: spec.has_batch_norm(),
        base_sigma: cfg.base_sigma,
        target_sigma: cfg.target_sigma,
        alpha_grid: grid.clone(),
        rows,
        checksums,
    };
    let sweep = SweepResult {
        model_a: base.checksum(),
        model_b: target.checksum(),
        alpha_grid: grid,
        levels,
    };
    write_json(&cfg.out_dir.join("sweep.json"), &sweep)?;
    write_json(&cfg.out_dir.join("unseen_noise.json"), &report)?;
    write_file(&cfg.out_dir.join("unseen_noise.txt"), &report.to_table())?;
    Ok(report)
}

/// Conv layers analyzed by the correlation study: the convolutions at
/// ordinals `round(5/17 D)` and `round(12/17 D)` (1-based) of a net with
/// `D` convolutions, i.e. the 5th and 12th of a 17-layer net.
pub fn analyzed_layers(spec: &ArchSpec) -> Vec<String> {
    let convs = spec.conv_layer_names();
    let d = convs.len() as f64;
    let pick = |num: f64| {
        let ord = ((num / 17.0 * d).round() as usize).clamp(1, convs.len());
        convs[ord - 1].clone()
    };
    let mut out = vec![pick(5.0), pick(12.0)];
    out.dedup();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub sigma: f32,
    pub median: f64,
    pub q10: f64,
    pub q25: f64,
    pub q75: f64,
    pub q90: f64,
}

impl CurvePoint {
    fn from_report(sigma: f32, r: &CorrelationReport) -> Self {
        Self {
            sigma,
            median: r.median,
            q10: r.quantiles.q10,
            q25: r.quantiles.q25,
            q75: r.quantiles.q75,
            q90: r.quantiles.q90,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCorrelation {
    pub layer: String,
    /// Median correlation of each level's model against the base model.
    pub curve: Vec<CurvePoint>,
    /// Two scratch models at the base level.
    pub scratch_pair_median: f64,
    /// Fine-tuned target model against its base parent.
    pub finetune_pair_median: f64,
    /// Correlation-fitted alpha for each intermediate level's model, with
    /// `a` = base and `b` = fine-tuned target.
    pub fitted_alpha: Vec<(f32, f64)>,
    /// Fitted alpha for targets equal to the endpoints (expected 1 and 0).
    pub endpoint_alpha: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationStudyReport {
    pub arch: String,
    pub base_sigma: f32,
    pub target_sigma: f32,
    pub layers: Vec<LayerCorrelation>,
    pub reports: Vec<CorrelationReport>,
}

impl CorrelationStudyReport {
    pub fn layer(&self, name: &str) -> Option<&LayerCorrelation> {
        self.layers.iter().find(|l| l.layer == name)
    }

    /// `layer,level,median,q10,q90` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,level,median,q10,q90\n");
        for l in &self.layers {
            for p in &l.curve {
                let _ = writeln!(out, "{},{},{},{},{}", l.layer, p.sigma, p.median, p.q10, p.q90);
            }
            let _ = writeln!(
                out,
                "{},scratch-pair,{},,",
                l.layer, l.scratch_pair_median
            );
        }
        out
    }
}

/// Correlation curves of the fine-tuned level sequence against the base
/// model, the scratch-pair control and correlation-fitted alphas. Writes
/// `correlation.{json,csv}` into the output directory.
pub fn run_correlation_study(store: &mut StudyStore) -> Result<CorrelationStudyReport, HarnessError> {
    let cfg = store.config().clone();
    let spec = store.spec().clone();
    let base = store.get(&Stage::Base)?;
    let control = store.get(&Stage::Control)?;
    let mut chain = vec![(cfg.base_sigma, base.clone())];
    for &s in &cfg.levels {
        if s != cfg.base_sigma {
            chain.push((s, store.get(&Stage::Finetune(s))?));
        }
    }
    chain.sort_by(|a, b| a.0.total_cmp(&b.0));
    let target = store.get(&Stage::Finetune(cfg.target_sigma))?;

    let mut layers = Vec::new();
    let mut reports = Vec::new();
    for layer in analyzed_layers(&spec) {
        let lc = staged(&format!("correlate-{layer}"), (|| {
            let mut curve = Vec::new();
            for (s, m) in &chain {
                let r = model_corr(m, &base, &layer, FilterPolicy::Positionwise)?;
                curve.push(CurvePoint::from_report(*s, &r));
                reports.push(r);
            }
            let scratch = model_corr(&control, &base, &layer, FilterPolicy::Positionwise)?;
            let ft = model_corr(&target, &base, &layer, FilterPolicy::Positionwise)?;
            let mut fitted_alpha = Vec::new();
            for (s, m) in &chain {
                if cfg.unseen(*s) {
                    fitted_alpha.push((*s, fit_alpha_curve(&base, &target, m, &layer)?.0));
                }
            }
            let endpoint_alpha = (
                analysis::fit_alpha_by_corr(&base, &target, &base, &layer)?,
                analysis::fit_alpha_by_corr(&base, &target, &target, &layer)?,
            );
            let lc = LayerCorrelation {
                layer: layer.clone(),
                curve,
                scratch_pair_median: scratch.median,
                finetune_pair_median: ft.median,
                fitted_alpha,
                endpoint_alpha,
            };
            reports.push(scratch);
            Ok(lc)
        })())?;
        layers.push(lc);
    }
    let report = CorrelationStudyReport {
        arch: spec.arch_id.clone(),
        base_sigma: cfg.base_sigma,
        target_sigma: cfg.target_sigma,
        layers,
        reports,
    };
    write_json(&cfg.out_dir.join("correlation.json"), &report)?;
    write_file(&cfg.out_dir.join("correlation.csv"), &report.to_csv())?;
    Ok(report)
}

/// Evaluates one model on a noisy test set built from `clean`; used by the
/// CLI `psnr`-style reporting and tests.
pub fn evaluate_model(params: &ParamSet, clean: &[Image], sigma: f32, noise_seed: u64) -> Result<f64, HarnessError> {
    let spec = spec_of(params)?;
    NoisyTestSet::new(clean, sigma, noise_seed)?.evaluate(&spec, params)
}

/// Wraps a clean `[h, w]` plane as an image tensor; convenience for tests.
pub fn image_from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Image {
    let data = (0..height).flat_map(|y| (0..width).map(move |x| (y, x))).map(|(y, x)| f(y, x)).collect();
    Image::from_tensor(Tensor::new(vec![1, 1, height, width], data).expect("shape")).expect("image")
}
