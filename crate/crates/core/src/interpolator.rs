//! Parameter-space interpolation: convex combinations of corresponding
//! tensors across same-architecture models, plus the output-space
//! baselines (pixel interpolation, masked blending) it is compared with.
//!
//! Every tensor is combined the same way: conv weights, biases, batch-norm
//! affine parameters and batch-norm running statistics (variance space).
//! Terms are accumulated in recipe order, so a given recipe always yields
//! the same bits.

use std::fmt;

use thiserror::Error;

use crate::checkpoint::{lineage_check, Meta, ParamSet, RecipeRecord};
use crate::tensor::{axpy, Tensor, TensorError};

pub const ALPHA_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum InterpError {
    #[error("recipe has no terms")]
    Empty,
    #[error("coefficient {index} is {alpha}; coefficients must be finite and >= 0")]
    NegativeAlpha { index: usize, alpha: f64 },
    #[error("alpha {0} is outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("coefficients sum to {0}, expected 1 within 1e-6")]
    CoefficientSum(f64),
    #[error("model {index} has architecture `{found}`, expected `{expected}`")]
    ArchMismatch {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("model {0} does not have the same parameter names and shapes")]
    NameShapeMismatch(usize),
    #[error("mask value {0} is outside [0, 1]")]
    MaskRange(f32),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Non-fatal findings about an interpolation request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InterpWarning {
    /// Neither model descends from the other; interpolation is likely to
    /// be meaningless, but it is allowed (negative-control experiments).
    NotFineTuneRelated { first: usize, second: usize },
}

impl fmt::Display for InterpWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InterpWarning::NotFineTuneRelated { first, second } => write!(
                f,
                "models {first} and {second} are not fine-tune related; their filters may not correspond"
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Interpolation {
    pub params: ParamSet,
    pub warnings: Vec<InterpWarning>,
}

/// Convex combination `sum_i alpha_i * theta_i` over models sharing one
/// architecture.
#[derive(Debug, Clone)]
pub struct InterpolationRecipe<'a> {
    terms: Vec<(&'a ParamSet, f64)>,
}

impl<'a> InterpolationRecipe<'a> {
    pub fn new(terms: Vec<(&'a ParamSet, f64)>) -> Result<Self, InterpError> {
        let first = terms.first().ok_or(InterpError::Empty)?.0;
        let mut sum = 0.0;
        for (index, (p, alpha)) in terms.iter().enumerate() {
            if !alpha.is_finite() || *alpha < 0.0 {
                return Err(InterpError::NegativeAlpha {
                    index,
                    alpha: *alpha,
                });
            }
            sum += alpha;
            let report = lineage_check(first, p);
            if !report.same_arch {
                return Err(InterpError::ArchMismatch {
                    index,
                    expected: first.arch_id.clone(),
                    found: p.arch_id.clone(),
                });
            }
            if !report.same_names_shapes {
                return Err(InterpError::NameShapeMismatch(index));
            }
        }
        if (sum - 1.0).abs() > ALPHA_SUM_TOLERANCE {
            return Err(InterpError::CoefficientSum(sum));
        }
        Ok(Self { terms })
    }

    pub fn terms(&self) -> &[(&'a ParamSet, f64)] {
        &self.terms
    }

    fn warnings(&self) -> Vec<InterpWarning> {
        let mut out = Vec::new();
        let active: Vec<usize> = (0..self.terms.len())
            .filter(|&i| self.terms[i].1 > 0.0)
            .collect();
        for (k, &i) in active.iter().enumerate() {
            for &j in &active[k + 1..] {
                if !lineage_check(self.terms[i].0, self.terms[j].0).fine_tune_related {
                    out.push(InterpWarning::NotFineTuneRelated { first: i, second: j });
                }
            }
        }
        out
    }
}

/// Two-model interpolation `alpha * a + (1 - alpha) * b`.
///
/// Equivalent to [`interp_n`] on the recipe `[(a, alpha), (b, 1 - alpha)]`.
/// `alpha = 1` returns `a` and `alpha = 0` returns `b` bit for bit.
pub fn interp2(a: &ParamSet, b: &ParamSet, alpha: f64) -> Result<Interpolation, InterpError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(InterpError::AlphaOutOfRange(alpha));
    }
    let recipe = InterpolationRecipe::new(vec![(a, alpha), (b, 1.0 - alpha)])?;
    let mut out = interp_n(&recipe)?;
    out.params.meta.task_tag = format!(
        "interp({},{},{})",
        a.meta.task_tag,
        b.meta.task_tag,
        fmt_alpha(alpha)
    );
    Ok(out)
}

fn fmt_alpha(a: f64) -> String {
    // shortest round-trip form, e.g. 0.7 rather than 0.7000000000000001
    let s = format!("{a}");
    if s.len() > 8 {
        format!("{a:.6}").trim_end_matches('0').to_string()
    } else {
        s
    }
}

/// N-model interpolation. Terms are accumulated in recipe order.
pub fn interp_n(recipe: &InterpolationRecipe<'_>) -> Result<Interpolation, InterpError> {
    let terms = &recipe.terms;
    let first = terms[0].0;
    let tensors = combine(
        terms
            .iter()
            .map(|(p, a)| (p.tensors().collect::<Vec<_>>(), *a))
            .collect(),
    )?;

    let mut params = first.clone();
    params.replace_tensors(tensors);
    let tag = terms
        .iter()
        .map(|(p, a)| format!("{}:{}", p.meta.task_tag, fmt_alpha(*a)))
        .collect::<Vec<_>>()
        .join(",");
    let mut meta = Meta::new(format!("interp({tag})"), 0);
    meta.created_iso8601 = first.meta.created_iso8601.clone();
    meta.recipe = Some(
        terms
            .iter()
            .map(|(p, a)| RecipeRecord {
                checksum: p.checksum(),
                task_tag: p.meta.task_tag.clone(),
                alpha: *a,
            })
            .collect(),
    );
    params.meta = meta;
    Ok(Interpolation {
        params,
        warnings: recipe.warnings(),
    })
}

/// Combines parallel lists of tensors with the given weights. A term
/// carrying all the mass is returned as an exact copy.
fn combine(terms: Vec<(Vec<&Tensor>, f64)>) -> Result<Vec<Tensor>, InterpError> {
    if let Some((ts, _)) = terms.iter().find(|(_, a)| *a == 1.0) {
        return Ok(ts.iter().map(|t| (*t).clone()).collect());
    }
    let count = terms[0].0.len();
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let mut acc = Tensor::zeros(terms[0].0[k].shape())?;
        for (ts, alpha) in &terms {
            acc = axpy(*alpha as f32, ts[k], &acc)?;
        }
        out.push(acc);
    }
    Ok(out)
}

/// Two-tensor form of [`interp2`]: `alpha * a + (1 - alpha) * b`, same
/// accumulation order and endpoint handling.
pub fn lerp_tensor(a: &Tensor, b: &Tensor, alpha: f64) -> Result<Tensor, InterpError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(InterpError::AlphaOutOfRange(alpha));
    }
    if a.shape() != b.shape() {
        return Err(InterpError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(combine(vec![(vec![a], alpha), (vec![b], 1.0 - alpha)])?.remove(0))
}

fn check_convex(alphas: &[f64]) -> Result<(), InterpError> {
    if alphas.is_empty() {
        return Err(InterpError::Empty);
    }
    for (index, &alpha) in alphas.iter().enumerate() {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(InterpError::NegativeAlpha { index, alpha });
        }
    }
    let sum: f64 = alphas.iter().sum();
    if (sum - 1.0).abs() > ALPHA_SUM_TOLERANCE {
        return Err(InterpError::CoefficientSum(sum));
    }
    Ok(())
}

/// Output-space baseline: convex combination of images, pixel by pixel.
pub fn pixel_interp(images: &[Tensor], alphas: &[f64]) -> Result<Tensor, InterpError> {
    check_convex(alphas)?;
    if images.len() != alphas.len() {
        return Err(InterpError::ShapeMismatch(vec![images.len()], vec![alphas.len()]));
    }
    for img in &images[1..] {
        if img.shape() != images[0].shape() {
            return Err(InterpError::ShapeMismatch(
                images[0].shape().to_vec(),
                img.shape().to_vec(),
            ));
        }
    }
    let terms = images
        .iter()
        .zip(alphas)
        .map(|(t, a)| (vec![t], *a))
        .collect();
    Ok(combine(terms)?.remove(0))
}

/// Per-pixel blend `mask * out_a + (1 - mask) * out_b`.
///
/// `mask` covers the trailing `[h, w]` plane and is broadcast over any
/// leading (batch, channel) dimensions.
pub fn spatial_blend(out_a: &Tensor, out_b: &Tensor, mask: &Tensor) -> Result<Tensor, InterpError> {
    if out_a.shape() != out_b.shape() {
        return Err(InterpError::ShapeMismatch(
            out_a.shape().to_vec(),
            out_b.shape().to_vec(),
        ));
    }
    let s = out_a.shape();
    let plane = if s.len() >= 2 { s[s.len() - 2] * s[s.len() - 1] } else { s[0] };
    let ms = mask.shape();
    let mask_plane_ok = ms.len() >= 2
        && s.len() >= 2
        && ms[ms.len() - 2..] == s[s.len() - 2..]
        && mask.numel() == plane;
    if !mask_plane_ok {
        return Err(InterpError::ShapeMismatch(ms.to_vec(), s.to_vec()));
    }
    if let Some(&bad) = mask.data().iter().find(|m| !(0.0..=1.0).contains(*m)) {
        return Err(InterpError::MaskRange(bad));
    }
    let m = mask.data();
    let data = out_a
        .data()
        .iter()
        .zip(out_b.data())
        .enumerate()
        .map(|(i, (&a, &b))| {
            let w = m[i % plane];
            if w == 1.0 {
                a
            } else if w == 0.0 {
                b
            } else {
                w * a + (1.0 - w) * b
            }
        })
        .collect();
    Ok(Tensor::new(s.to_vec(), data)?)
}
