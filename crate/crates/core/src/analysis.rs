//! Filter correlation analysis.
//!
//! The correlation index between two filters is the centered cosine
//! similarity (Pearson correlation of their entries), so it ignores both
//! scale and shift. It is used to compare positionally corresponding
//! filters across models and to estimate which interpolation coefficient
//! best matches an intermediate model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::ParamSet;
use crate::interpolator::{lerp_tensor, InterpError};
use crate::tensor::Tensor;

/// Centered norms at or below this are treated as constant filters.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("filters differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("filter is constant (centered norm {0:e}); correlation is undefined")]
    Degenerate(f64),
    #[error("layer `{0}` not found")]
    LayerMissing(String),
    #[error("layer `{layer}` has shape {a:?} in one model and {b:?} in the other")]
    LayerShape {
        layer: String,
        a: Vec<usize>,
        b: Vec<usize>,
    },
    #[error("layer `{0}` is not a 4-d convolution weight")]
    NotConv(String),
    #[error("filter ({out_index}, {in_index}) is outside layer `{layer}`")]
    FilterIndex {
        layer: String,
        out_index: usize,
        in_index: usize,
    },
    #[error("every filter of layer `{0}` is constant")]
    AllConstant(String),
    #[error(transparent)]
    Interp(#[from] InterpError),
}

/// Correlation index of two equally sized filters.
pub fn corr_index(f1: &Tensor, f2: &Tensor) -> Result<f64, AnalysisError> {
    corr_index_f32(f1.data(), f2.data())
}

pub fn corr_index_f32(f1: &[f32], f2: &[f32]) -> Result<f64, AnalysisError> {
    let a: Vec<f64> = f1.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = f2.iter().map(|&v| v as f64).collect();
    corr_index_f64(&a, &b)
}

pub fn corr_index_f64(f1: &[f64], f2: &[f64]) -> Result<f64, AnalysisError> {
    if f1.len() != f2.len() {
        return Err(AnalysisError::LengthMismatch(f1.len(), f2.len()));
    }
    let n = f1.len() as f64;
    let m1 = f1.iter().sum::<f64>() / n;
    let m2 = f2.iter().sum::<f64>() / n;
    let (mut dot, mut ss1, mut ss2) = (0.0, 0.0, 0.0);
    for (&x, &y) in f1.iter().zip(f2) {
        let (dx, dy) = (x - m1, y - m2);
        dot += dx * dy;
        ss1 += dx * dx;
        ss2 += dy * dy;
    }
    for ss in [ss1, ss2] {
        if ss.is_nan() || ss.sqrt() <= DEGENERATE_NORM {
            return Err(AnalysisError::Degenerate(ss.sqrt()));
        }
    }
    Ok((dot / (ss1 * ss2).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterRef {
    pub layer_name: String,
    pub out_index: usize,
    pub in_index: usize,
}

/// Which filters of a layer are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum FilterPolicy {
    /// Every (out, in) filter against the filter at the same position.
    Positionwise,
    /// A single tracked position, by default (0, 0).
    Single { out_index: usize, in_index: usize },
}

impl FilterPolicy {
    pub fn first_filter() -> Self {
        FilterPolicy::Single {
            out_index: 0,
            in_index: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub q10: f64,
    pub q25: f64,
    pub q75: f64,
    pub q90: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub model_checksum: String,
    pub reference_checksum: String,
    pub layer: String,
    pub policy: FilterPolicy,
    pub per_filter: Vec<(FilterRef, f64)>,
    pub skipped_constant: usize,
    pub median: f64,
    pub quantiles: Quantiles,
}

/// Linear-interpolation quantile of sorted data (the "type 7" estimator).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

fn weight_of<'a>(p: &'a ParamSet, layer: &str) -> Result<&'a Tensor, AnalysisError> {
    let name = format!("{}.weight", layer.trim_end_matches(".weight"));
    let t = p
        .get(&name)
        .ok_or_else(|| AnalysisError::LayerMissing(layer.to_string()))?;
    if t.shape().len() != 4 {
        return Err(AnalysisError::NotConv(layer.to_string()));
    }
    Ok(t)
}

fn filter(w: &Tensor, o: usize, i: usize) -> &[f32] {
    let s = w.shape();
    let k2 = s[2] * s[3];
    let start = (o * s[1] + i) * k2;
    &w.data()[start..start + k2]
}

fn layer_pair<'a>(
    model: &'a ParamSet,
    reference: &'a ParamSet,
    layer: &str,
) -> Result<(&'a Tensor, &'a Tensor), AnalysisError> {
    let w = weight_of(model, layer)?;
    let r = weight_of(reference, layer)?;
    if w.shape() != r.shape() {
        return Err(AnalysisError::LayerShape {
            layer: layer.to_string(),
            a: w.shape().to_vec(),
            b: r.shape().to_vec(),
        });
    }
    Ok((w, r))
}

/// Correlation of the named layer's filters against `reference`.
///
/// `layer` is a layer name such as `conv2` (a trailing `.weight` is
/// accepted). Constant filters on either side are skipped and counted.
pub fn model_corr(
    model: &ParamSet,
    reference: &ParamSet,
    layer: &str,
    policy: FilterPolicy,
) -> Result<CorrelationReport, AnalysisError> {
    let (w, r) = layer_pair(model, reference, layer)?;
    let layer_name = layer.trim_end_matches(".weight").to_string();
    let rhos = weight_corrs(w, r, &layer_name, policy)?;
    let mut report = summarize(&layer_name, policy, rhos)?;
    report.model_checksum = model.checksum();
    report.reference_checksum = reference.checksum();
    Ok(report)
}

fn weight_corrs(
    w: &Tensor,
    r: &Tensor,
    layer: &str,
    policy: FilterPolicy,
) -> Result<(Vec<(FilterRef, f64)>, usize), AnalysisError> {
    let s = w.shape();
    let positions: Vec<(usize, usize)> = match policy {
        FilterPolicy::Positionwise => (0..s[0])
            .flat_map(|o| (0..s[1]).map(move |i| (o, i)))
            .collect(),
        FilterPolicy::Single {
            out_index,
            in_index,
        } => {
            if out_index >= s[0] || in_index >= s[1] {
                return Err(AnalysisError::FilterIndex {
                    layer: layer.to_string(),
                    out_index,
                    in_index,
                });
            }
            vec![(out_index, in_index)]
        }
    };
    let mut out = Vec::with_capacity(positions.len());
    let mut skipped = 0;
    for (o, i) in positions {
        match corr_index_f32(filter(w, o, i), filter(r, o, i)) {
            Ok(rho) => out.push((
                FilterRef {
                    layer_name: layer.to_string(),
                    out_index: o,
                    in_index: i,
                },
                rho,
            )),
            Err(AnalysisError::Degenerate(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((out, skipped))
}

fn summarize(
    layer: &str,
    policy: FilterPolicy,
    (per_filter, skipped_constant): (Vec<(FilterRef, f64)>, usize),
) -> Result<CorrelationReport, AnalysisError> {
    if per_filter.is_empty() {
        return Err(AnalysisError::AllConstant(layer.to_string()));
    }
    let mut sorted: Vec<f64> = per_filter.iter().map(|(_, r)| *r).collect();
    sorted.sort_by(f64::total_cmp);
    Ok(CorrelationReport {
        model_checksum: String::new(),
        reference_checksum: String::new(),
        layer: layer.to_string(),
        policy,
        median: quantile_sorted(&sorted, 0.5),
        quantiles: Quantiles {
            q10: quantile_sorted(&sorted, 0.1),
            q25: quantile_sorted(&sorted, 0.25),
            q75: quantile_sorted(&sorted, 0.75),
            q90: quantile_sorted(&sorted, 0.9),
        },
        per_filter,
        skipped_constant,
    })
}

/// The alpha grid `0, 0.05, ..., 1` used by [`fit_alpha_by_corr`].
pub fn corr_fit_grid() -> Vec<f64> {
    (0..=20).map(|k| k as f64 / 20.0).collect()
}

/// Grid search for the coefficient whose interpolation `alpha*a + (1-alpha)*b`
/// best matches `target`'s filters on `layer` (highest positionwise median).
/// Ties go to the larger alpha.
pub fn fit_alpha_by_corr(
    a: &ParamSet,
    b: &ParamSet,
    target: &ParamSet,
    layer: &str,
) -> Result<f64, AnalysisError> {
    Ok(fit_alpha_curve(a, b, target, layer)?.0)
}

/// As [`fit_alpha_by_corr`], also returning the `(alpha, median)` curve.
pub fn fit_alpha_curve(
    a: &ParamSet,
    b: &ParamSet,
    target: &ParamSet,
    layer: &str,
) -> Result<(f64, Vec<(f64, f64)>), AnalysisError> {
    let (wa, wt) = layer_pair(a, target, layer)?;
    let (wb, _) = layer_pair(b, target, layer)?;
    let layer_name = layer.trim_end_matches(".weight");
    let mut curve = Vec::new();
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for alpha in corr_fit_grid() {
        let w = lerp_tensor(wa, wb, alpha)?;
        let rhos = weight_corrs(&w, wt, layer_name, FilterPolicy::Positionwise)?;
        let median = summarize(layer_name, FilterPolicy::Positionwise, rhos)?.median;
        if median >= best.1 {
            best = (alpha, median);
        }
        curve.push((alpha, median));
    }
    Ok((best.0, curve))
}

/// CSV rows `level,median,q10,q90` for plotting correlation curves.
pub fn curve_csv(rows: &[(String, &CorrelationReport)]) -> String {
    let mut out = String::from("level,median,q10,q90\n");
    for (level, r) in rows {
        out.push_str(&format!(
            "{level},{},{},{}\n",
            r.median, r.quantiles.q10, r.quantiles.q90
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::Meta;

    fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
        // textbook n*sxy - sx*sy form, independent of the centered form
        let n = x.len() as f64;
        let sx: f64 = x.iter().sum();
        let sy: f64 = y.iter().sum();
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|a| a * a).sum();
        (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
    }

    #[test]
    fn hand_example() {
        let rho = corr_index_f64(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((rho - 0.8).abs() < 1e-12);
        assert!((rho - pearson_oracle(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0])).abs() < 1e-12);
    }

    #[test]
    fn self_and_affine() {
        let f = [0.3, -1.2, 2.5, 0.0, 0.7, -0.4, 1.1, 0.9, -2.0];
        assert_eq!(corr_index_f64(&f, &f).unwrap(), 1.0);
        let pos: Vec<f64> = f.iter().map(|v| 3.0 * v + 7.0).collect();
        let neg: Vec<f64> = f.iter().map(|v| -0.5 * v + 1.0).collect();
        assert!((corr_index_f64(&f, &pos).unwrap() - 1.0).abs() < 1e-12);
        assert!((corr_index_f64(&f, &neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            corr_index_f64(&[2.0; 4], &[1.0, 2.0, 3.0, 4.0]),
            Err(AnalysisError::Degenerate(_))
        ));
        assert!(matches!(
            corr_index_f64(&[1.0, 2.0], &[1.0, 2.0, 3.0]),
            Err(AnalysisError::LengthMismatch(2, 3))
        ));
    }

    #[test]
    fn quantiles_interpolate_linearly() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&s, 0.5), 3.0);
        assert_eq!(quantile_sorted(&s, 0.25), 2.0);
        assert!((quantile_sorted(&s, 0.1) - 1.4).abs() < 1e-12);
        assert_eq!(quantile_sorted(&[1.0, 2.0], 0.5), 1.5);
    }

    fn conv_model(vals: Vec<f32>) -> ParamSet {
        let w = Tensor::new(vec![2, 1, 2, 2], vals).unwrap();
        ParamSet::new("toy", vec![("conv0.weight".into(), w)], Meta::new("m", 0)).unwrap()
    }

    #[test]
    fn model_corr_against_self() {
        let m = conv_model(vec![1.0, 2.0, 3.0, 4.0, 0.5, -1.0, 2.0, 0.0]);
        let r = model_corr(&m, &m, "conv0", FilterPolicy::Positionwise).unwrap();
        assert_eq!(r.per_filter.len(), 2);
        assert_eq!(r.median, 1.0);
        assert_eq!(r.skipped_constant, 0);
        let single = model_corr(&m, &m, "conv0.weight", FilterPolicy::first_filter()).unwrap();
        assert_eq!(single.per_filter.len(), 1);
        assert!(matches!(
            model_corr(&m, &m, "conv9", FilterPolicy::Positionwise),
            Err(AnalysisError::LayerMissing(_))
        ));
        assert!(matches!(
            model_corr(&m, &m, "conv0", FilterPolicy::Single { out_index: 2, in_index: 0 }),
            Err(AnalysisError::FilterIndex { .. })
        ));
    }

    #[test]
    fn constant_filters_are_skipped() {
        let m = conv_model(vec![1.0, 2.0, 3.0, 4.0, 5.0, 5.0, 5.0, 5.0]);
        let r = model_corr(&m, &m, "conv0", FilterPolicy::Positionwise).unwrap();
        assert_eq!(r.per_filter.len(), 1);
        assert_eq!(r.skipped_constant, 1);
        let flat = conv_model(vec![1.0; 8]);
        assert!(matches!(
            model_corr(&flat, &flat, "conv0", FilterPolicy::Positionwise),
            Err(AnalysisError::AllConstant(_))
        ));
    }

    #[test]
    fn fit_alpha_endpoints() {
        let a = conv_model(vec![1.0, 2.0, 3.0, 4.0, 0.5, -1.0, 2.0, 0.0]);
        let b = conv_model(vec![4.0, -2.0, 1.0, 0.0, 1.0, 1.0, -3.0, 2.0]);
        assert_eq!(fit_alpha_by_corr(&a, &b, &a, "conv0").unwrap(), 1.0);
        assert_eq!(fit_alpha_by_corr(&a, &b, &b, "conv0").unwrap(), 0.0);
        let (_, curve) = fit_alpha_curve(&a, &b, &a, "conv0").unwrap();
        assert_eq!(curve.len(), 21);
        assert_eq!(curve[20], (1.0, 1.0));
    }

    #[test]
    fn csv_rows() {
        let m = conv_model(vec![1.0, 2.0, 3.0, 4.0, 0.5, -1.0, 2.0, 0.0]);
        let r = model_corr(&m, &m, "conv0", FilterPolicy::Positionwise).unwrap();
        let csv = curve_csv(&[("20".into(), &r)]);
        assert_eq!(csv, "level,median,q10,q90\n20,1,1,1\n");
    }
}
