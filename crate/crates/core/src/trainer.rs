//! Deterministic training and fine-tuning of denoisers.
//!
//! Images live on the 0..255 scale; the network sees them divided by 255
//! and is trained with MSE against the clean patch on that [0, 1] scale.
//! Every random choice (patch positions, per-batch noise level, noise
//! field, augmentation) comes from one PRNG stream derived from the
//! config seed, so `(arch, config, dataset order)` fixes the result bit for
//! bit.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{CheckpointError, ParamSet};
use crate::imaging::{load_manifest, Image, ImageError};
use crate::netgraph::{backward, forward, init_params, ArchSpec, GraphError, Mode};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

/// Fine-tuning runs at the configured learning rate times this factor.
pub const FINETUNE_LR_FACTOR: f64 = 0.1;

/// Network inputs and targets are images divided by this.
pub const PIXEL_SCALE: f32 = 255.0;

const PATCH_STREAM: u64 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("image {index} is {width}x{height}, smaller than the {patch}px patch")]
    ImageTooSmall {
        index: usize,
        width: usize,
        height: usize,
        patch: usize,
    },
    #[error("training diverged at iteration {iteration} (loss {loss})")]
    Diverged { iteration: usize, loss: f64 },
    #[error("base model has architecture `{found}`, expected `{expected}`")]
    ArchMismatch { expected: String, found: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Multiply the learning rate by `factor` every `every` iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub every: usize,
    pub factor: f64,
}

fn default_log_every() -> usize {
    100
}

fn default_created() -> String {
    crate::checkpoint::EPOCH_ISO8601.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub lr_decay: Option<StepDecay>,
    pub seed: u64,
    /// One level, or several for mixed-level training (one level drawn
    /// uniformly per batch).
    pub noise_sigmas: Vec<f32>,
    /// Random flips and rotations of each patch.
    #[serde(default)]
    pub augment: bool,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Emit an intermediate checkpoint every this many iterations.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    /// Timestamp stamped into the checkpoint metadata.
    #[serde(default = "default_created")]
    pub created_iso8601: String,
}

impl TrainConfig {
    /// Desk-scale defaults: 40px patches, batch 16, Adam at 1e-3.
    pub fn new(noise_sigmas: Vec<f32>, iterations: usize, seed: u64) -> Self {
        Self {
            iterations,
            batch_size: 16,
            patch_size: 40,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            lr_decay: None,
            seed,
            noise_sigmas,
            augment: false,
            log_every: default_log_every(),
            checkpoint_every: None,
            created_iso8601: default_created(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 || self.patch_size == 0 {
            return bad("batch_size and patch_size must be positive");
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return bad("learning_rate must be positive");
        }
        if self.noise_sigmas.is_empty() {
            return bad("at least one noise sigma is required");
        }
        if self.noise_sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return bad("noise sigmas must be finite and >= 0");
        }
        if self.log_every == 0 || self.checkpoint_every == Some(0) {
            return bad("log_every and checkpoint_every must be positive");
        }
        if let Some(d) = self.lr_decay {
            if d.every == 0 || d.factor.is_nan() || d.factor <= 0.0 {
                return bad("lr_decay needs every > 0 and factor > 0");
            }
        }
        Ok(())
    }

    /// `denoise-n20`, or `denoise-n20+60` for mixed levels.
    pub fn task_tag(&self) -> String {
        let levels: Vec<String> = self.noise_sigmas.iter().map(|s| format!("{s}")).collect();
        format!("denoise-n{}", levels.join("+"))
    }

    fn lr_at(&self, base: f64, iteration: usize) -> f64 {
        match self.lr_decay {
            Some(d) => base * d.factor.powi((iteration / d.every) as i32),
            None => base,
        }
    }
}

/// Clean training images on the 0..255 scale.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<Image>,
}

impl Dataset {
    pub fn new(images: Vec<Image>) -> Result<Self, TrainError> {
        if images.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        Ok(Self { images })
    }

    pub fn from_manifest(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        Self::new(load_manifest(path)?)
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    fn check_patch(&self, patch: usize) -> Result<(), TrainError> {
        for (index, img) in self.images.iter().enumerate() {
            if img.width() < patch || img.height() < patch {
                return Err(TrainError::ImageTooSmall {
                    index,
                    width: img.width(),
                    height: img.height(),
                    patch,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    /// Mean loss since the previous record.
    pub loss: f64,
    pub lr: f64,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{:.8e},{:e}", self.iter, self.loss, self.lr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub task_tag: String,
    pub arch_id: String,
    pub iterations: usize,
    pub final_loss: Option<f64>,
    pub checksum: String,
    pub parent_checksum: Option<String>,
}

/// Receives log records and intermediate checkpoints as training runs.
pub trait TrainObserver {
    fn log(&mut self, _record: &LogRecord) {}

    fn checkpoint(&mut self, _iteration: usize, _params: &ParamSet) -> Result<(), TrainError> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Keeps every log record in memory.
#[derive(Debug, Default)]
pub struct LogCollector(pub Vec<LogRecord>);

impl TrainObserver for LogCollector {
    fn log(&mut self, record: &LogRecord) {
        self.0.push(*record);
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub log: Vec<LogRecord>,
    pub summary: TrainSummary,
}

/// Trains `spec` from its seeded initialization.
pub fn train(spec: &ArchSpec, config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome, TrainError> {
    train_observed(spec, config, data, &mut ())
}

pub fn train_observed(
    spec: &ArchSpec,
    config: &TrainConfig,
    data: &Dataset,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let mut params = init_params(spec, config.seed)?;
    params.meta.task_tag = config.task_tag();
    params.meta.created_iso8601 = config.created_iso8601.clone();
    run(spec, params, config, config.learning_rate, data, observer)
}

/// Continues training `base` on the config's task at a tenth of the
/// configured learning rate. The result records `base` as its parent.
pub fn finetune(
    spec: &ArchSpec,
    base: &ParamSet,
    config: &TrainConfig,
    data: &Dataset,
) -> Result<TrainOutcome, TrainError> {
    finetune_observed(spec, base, config, data, &mut ())
}

pub fn finetune_observed(
    spec: &ArchSpec,
    base: &ParamSet,
    config: &TrainConfig,
    data: &Dataset,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let arch_differs = base.arch.as_ref().is_some_and(|a| a != spec);
    if base.arch_id != spec.arch_id || arch_differs {
        return Err(TrainError::ArchMismatch {
            expected: spec.arch_id.clone(),
            found: base.arch_id.clone(),
        });
    }
    let parent = base.checksum();
    let mut params = base.clone();
    params.meta.task_tag = config.task_tag();
    params.meta.seed = config.seed;
    params.meta.created_iso8601 = config.created_iso8601.clone();
    params.meta.recipe = None;
    params.meta.lineage = std::iter::once(parent.clone())
        .chain(base.meta.ancestors().into_iter().map(String::from))
        .collect();
    params.meta.parent_checksum = Some(parent);
    let lr = config.learning_rate * FINETUNE_LR_FACTOR;
    run(spec, params, config, lr, data, observer)
}

fn run(
    spec: &ArchSpec,
    mut params: ParamSet,
    config: &TrainConfig,
    base_lr: f64,
    data: &Dataset,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainError> {
    data.check_patch(config.patch_size)?;
    let trainable: Vec<bool> = spec.param_layout().iter().map(|p| p.kind.trainable()).collect();
    let mut opt = OptState::new(config.optimizer, &params);
    let mut rng = Rng::new(derive_seed(config.seed, PATCH_STREAM));
    let mut log = Vec::new();
    let (mut window_sum, mut window_len) = (0.0f64, 0usize);

    for it in 0..config.iterations {
        let (noisy, clean) = sample_batch(&mut rng, data, config);
        let (y, cache) = forward(spec, &params, &noisy, Mode::Train)?;
        let count = y.numel() as f64;
        let mut loss = 0.0f64;
        let grad: Vec<f32> = y
            .data()
            .iter()
            .zip(clean.data())
            .map(|(&a, &b)| {
                let d = a - b;
                loss += d as f64 * d as f64;
                (2.0 * d as f64 / count) as f32
            })
            .collect();
        loss /= count;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { iteration: it, loss });
        }
        let grad = Tensor::new(y.shape().to_vec(), grad).expect("same shape as output");
        let grads = backward(spec, &params, &cache, &grad)?;
        cache.commit_running_stats(spec, &mut params)?;

        let lr = config.lr_at(base_lr, it);
        opt.step(&mut params, &grads, &trainable, lr);
        if params.tensors().any(|t| !t.is_finite()) {
            return Err(TrainError::Diverged {
                iteration: it,
                loss: f64::NAN,
            });
        }

        window_sum += loss;
        window_len += 1;
        let done = it + 1;
        if done % config.log_every == 0 || done == config.iterations {
            let rec = LogRecord {
                iter: done,
                loss: window_sum / window_len as f64,
                lr,
            };
            observer.log(&rec);
            log.push(rec);
            window_sum = 0.0;
            window_len = 0;
        }
        if let Some(every) = config.checkpoint_every {
            if done % every == 0 && done != config.iterations {
                observer.checkpoint(done, &params)?;
            }
        }
    }
    observer.checkpoint(config.iterations, &params)?;

    let summary = TrainSummary {
        task_tag: params.meta.task_tag.clone(),
        arch_id: params.arch_id.clone(),
        iterations: config.iterations,
        final_loss: log.last().map(|r| r.loss),
        checksum: params.checksum(),
        parent_checksum: params.meta.parent_checksum.clone(),
    };
    Ok(TrainOutcome { params, log, summary })
}

/// Draws one `(noisy, clean)` batch, both `[batch, 1, p, p]` on the [0, 1]
/// scale. Consumption order: noise level (mixed configs only), then per
/// patch its image, top, left, augmentation (if enabled) and noise field.
fn sample_batch(rng: &mut Rng, data: &Dataset, config: &TrainConfig) -> (Tensor, Tensor) {
    let p = config.patch_size;
    let sigma = match config.noise_sigmas.len() {
        1 => config.noise_sigmas[0],
        n => config.noise_sigmas[rng.below(n)],
    };
    let mut clean = Vec::with_capacity(config.batch_size * p * p);
    let mut noisy = Vec::with_capacity(config.batch_size * p * p);
    let mut patch = vec![0.0f32; p * p];
    for _ in 0..config.batch_size {
        let img = &data.images[rng.below(data.images.len())];
        let (w, h) = (img.width(), img.height());
        let top = rng.below(h - p + 1);
        let left = rng.below(w - p + 1);
        let px = img.pixels();
        for y in 0..p {
            patch[y * p..(y + 1) * p].copy_from_slice(&px[(top + y) * w + left..(top + y) * w + left + p]);
        }
        if config.augment {
            patch = dihedral(&patch, p, rng.below(8));
        }
        for &v in &patch {
            let n = (v as f64 + sigma as f64 * rng.normal()) as f32;
            clean.push(v / PIXEL_SCALE);
            noisy.push(n / PIXEL_SCALE);
        }
    }
    let shape = vec![config.batch_size, 1, p, p];
    (
        Tensor::new(shape.clone(), noisy).expect("batch shape"),
        Tensor::new(shape, clean).expect("batch shape"),
    )
}

/// One of the 8 symmetries of a square patch (rotations, optionally
/// transposed).
fn dihedral(src: &[f32], p: usize, k: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; p * p];
    for y in 0..p {
        for x in 0..p {
            let (mut sy, mut sx) = if k & 4 != 0 { (x, y) } else { (y, x) };
            for _ in 0..(k & 3) {
                (sy, sx) = (p - 1 - sx, sy);
            }
            out[y * p + x] = src[sy * p + sx];
        }
    }
    out
}

enum OptState {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: i32,
        m: Vec<Vec<f32>>,
        v: Vec<Vec<f32>>,
    },
}

impl OptState {
    fn new(kind: Optimizer, params: &ParamSet) -> Self {
        match kind {
            Optimizer::Sgd => OptState::Sgd,
            Optimizer::Adam { beta1, beta2, eps } => {
                let zeros: Vec<Vec<f32>> = params.tensors().map(|t| vec![0.0; t.numel()]).collect();
                OptState::Adam {
                    beta1,
                    beta2,
                    eps,
                    t: 0,
                    m: zeros.clone(),
                    v: zeros,
                }
            }
        }
    }

    fn step(&mut self, params: &mut ParamSet, grads: &crate::netgraph::Gradients, trainable: &[bool], lr: f64) {
        match self {
            OptState::Sgd => {
                for (k, (t, g)) in params.tensors_mut().zip(grads.tensors()).enumerate() {
                    if !trainable[k] {
                        continue;
                    }
                    for (p, &gv) in t.data_mut().iter_mut().zip(g.data()) {
                        *p = (*p as f64 - lr * gv as f64) as f32;
                    }
                }
            }
            OptState::Adam {
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            } => {
                *t += 1;
                let (b1, b2) = (*beta1, *beta2);
                let c1 = 1.0 - b1.powi(*t);
                let c2 = 1.0 - b2.powi(*t);
                for (k, (tensor, g)) in params.tensors_mut().zip(grads.tensors()).enumerate() {
                    if !trainable[k] {
                        continue;
                    }
                    let (mk, vk) = (&mut m[k], &mut v[k]);
                    for (i, (p, &gv)) in tensor.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let gv = gv as f64;
                        let mi = b1 * mk[i] as f64 + (1.0 - b1) * gv;
                        let vi = b2 * vk[i] as f64 + (1.0 - b2) * gv * gv;
                        mk[i] = mi as f32;
                        vk[i] = vi as f32;
                        let update = lr * (mi / c1) / ((vi / c2).sqrt() + *eps);
                        *p = (*p as f64 - update) as f32;
                    }
                }
            }
        }
    }
}
