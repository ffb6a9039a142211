//! Deep network interpolation toolkit.
//!
//! Builds new models as convex combinations of the parameters of correlated
//! trained networks, plus the pieces needed to train, analyze and evaluate
//! them at desk scale: a small CNN engine with reverse-mode gradients, a
//! self-describing checkpoint format, filter correlation analysis and a
//! Gaussian denoising pipeline.

pub mod analysis;
pub mod checkpoint;
pub mod harness;
pub mod imaging;
pub mod interpolator;
pub mod netgraph;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use analysis::{corr_index, fit_alpha_by_corr, model_corr, CorrelationReport, FilterPolicy};
pub use checkpoint::{lineage_check, CompatReport, Meta, ParamSet};
pub use harness::{StudyConfig, StudyReport, SweepResult};
pub use imaging::{Image, NoiseModel};
pub use interpolator::{interp2, interp_n, InterpolationRecipe};
pub use netgraph::{ArchSpec, LayerSpec, Mode};
pub use trainer::{Dataset, TrainConfig};
pub use tensor::Tensor;
