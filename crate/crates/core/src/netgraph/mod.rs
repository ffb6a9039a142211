//! Network description, forward inference, reverse-mode gradients and
//! batch-norm folding for small single-stream CNNs.
//!
//! Forward and backward are reentrant: all state lives in the returned
//! [`Cache`]. Train-mode batch norm reports updated running statistics in
//! the cache; committing them to a `ParamSet` is an explicit, separate step
//! ([`Cache::commit_running_stats`]), so a shared `ParamSet` is never
//! mutated behind the caller's back.

mod arch;
mod conv;

pub use arch::{ArchSpec, LayerSpec, ParamInfo, ParamKind, BN_EPS, BN_MOMENTUM, DEFAULT_DNCNN_WIDTH};

use thiserror::Error;

use crate::checkpoint::{CheckpointError, Meta, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};
use conv::ConvGeom;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("unknown architecture id `{0}`")]
    UnknownArch(String),
    #[error("parameters do not fit architecture: {0}")]
    ParamMismatch(String),
    #[error("input shape {got:?} does not fit the network (expected [n, {channels}, h, w])")]
    InputShape { got: Vec<usize>, channels: usize },
    #[error("non-finite activation after layer {layer}")]
    NonFinite { layer: usize },
    #[error("cache does not match this backward call: {0}")]
    StaleCache(String),
    #[error("no batch-norm layer to fold")]
    NoBatchNorm,
    #[error("batch norm at layer {layer} is not directly preceded by a convolution")]
    BnWithoutConv { layer: usize },
    #[error("batch norm at layer {layer}, channel {channel}: running_var + eps is not positive")]
    NonPositiveVariance { layer: usize, channel: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm normalizes with batch statistics (biased variance).
    Train,
    /// Batch norm normalizes with its running statistics.
    Eval,
}

/// Per-channel statistics a batch-norm layer normalized with.
#[derive(Debug, Clone)]
struct BnStats {
    mean: Vec<f32>,
    inv_std: Vec<f32>,
    /// Train mode only: biased batch variance, for the running update.
    batch_var: Option<Vec<f32>>,
}

/// Everything backward needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    arch_id: String,
    mode: Mode,
    params_checksum: String,
    batch: usize,
    h: usize,
    w: usize,
    /// `acts[i]` is the input of layer `i` in `[c, n, h, w]` layout; the
    /// last entry is the raw network output before the residual subtraction.
    acts: Vec<Vec<f32>>,
    bn: Vec<Option<BnStats>>,
}

impl Cache {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Running-statistics updates produced by a train-mode pass, as
    /// `(running_mean name, new mean, running_var name, new var)`.
    fn running_updates<'a>(
        &'a self,
        spec: &'a ArchSpec,
    ) -> impl Iterator<Item = (usize, Vec<f32>, Vec<f32>)> + 'a {
        spec.layers
            .iter()
            .enumerate()
            .filter_map(move |(i, layer)| match (layer, &self.bn[i]) {
                (LayerSpec::BatchNorm { .. }, Some(st)) if self.mode == Mode::Train => {
                    let var = st.batch_var.clone().expect("train-mode stats carry variance");
                    Some((i, st.mean.clone(), var))
                }
                _ => None,
            })
    }

    /// Applies the momentum update `running = (1 - m) * running + m * batch`
    /// for every batch-norm layer. No-op for eval-mode caches.
    pub fn commit_running_stats(&self, spec: &ArchSpec, params: &mut ParamSet) -> Result<(), GraphError> {
        let slots = LayerSlots::resolve(spec, params)?;
        for (i, mean, var) in self.running_updates(spec) {
            let momentum = match spec.layers[i] {
                LayerSpec::BatchNorm { momentum, .. } => momentum,
                _ => unreachable!(),
            };
            let (rm_idx, rv_idx) = match slots.0[i] {
                Slot::Bn { mean, var, .. } => (mean, var),
                _ => unreachable!(),
            };
            for (idx, batch) in [(rm_idx, mean), (rv_idx, var)] {
                let t = params.tensor_at_mut(idx);
                for (r, b) in t.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
            }
        }
        Ok(())
    }
}

/// Gradients aligned with a `ParamSet`'s entries (same names, same shapes).
#[derive(Debug, Clone)]
pub struct Gradients {
    entries: Vec<(String, Tensor)>,
}

impl Gradients {
    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Conv { weight: usize, bias: Option<usize> },
    Bn { gamma: usize, beta: usize, mean: usize, var: usize },
    None,
}

/// Index of each layer's tensors inside the parameter set.
struct LayerSlots(Vec<Slot>);

impl LayerSlots {
    fn resolve(spec: &ArchSpec, params: &ParamSet) -> Result<Self, GraphError> {
        let layout = spec.param_layout();
        if layout.len() != params.len() {
            return Err(GraphError::ParamMismatch(format!(
                "architecture `{}` has {} tensors, parameter set has {}",
                spec.arch_id,
                layout.len(),
                params.len()
            )));
        }
        for (info, (name, t)) in layout.iter().zip(params.entries()) {
            if &info.name != name || info.shape != t.shape() {
                return Err(GraphError::ParamMismatch(format!(
                    "expected `{}` {:?}, found `{}` {:?}",
                    info.name,
                    info.shape,
                    name,
                    t.shape()
                )));
            }
        }
        let mut slots = vec![Slot::None; spec.layers.len()];
        let mut idx = 0;
        for (i, layer) in spec.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv { has_bias, .. } => {
                    slots[i] = Slot::Conv {
                        weight: idx,
                        bias: has_bias.then_some(idx + 1),
                    };
                    idx += 1 + has_bias as usize;
                }
                LayerSpec::BatchNorm { .. } => {
                    slots[i] = Slot::Bn {
                        gamma: idx,
                        beta: idx + 1,
                        mean: idx + 2,
                        var: idx + 3,
                    };
                    idx += 4;
                }
                LayerSpec::ReLU => {}
            }
        }
        Ok(Self(slots))
    }
}

/// Deterministic initialization: conv weights `U(-b, b)` with
/// `b = 1/sqrt(fan_in)` drawn in layout order from `Rng::new(seed)`;
/// biases 0; batch norm gamma 1, beta 0, running mean 0, running var 1.
pub fn init_params(spec: &ArchSpec, seed: u64) -> Result<ParamSet, GraphError> {
    spec.validate()?;
    let mut rng = Rng::new(seed);
    let mut entries = Vec::new();
    for info in spec.param_layout() {
        let t = match info.kind {
            ParamKind::ConvWeight => {
                let fan_in: usize = info.shape[1..].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n: usize = info.shape.iter().product();
                let data = (0..n).map(|_| rng.uniform(-bound, bound) as f32).collect();
                Tensor::new(info.shape.clone(), data)?
            }
            ParamKind::ConvBias | ParamKind::BnBeta | ParamKind::BnRunningMean => {
                Tensor::zeros(&info.shape)?
            }
            ParamKind::BnGamma | ParamKind::BnRunningVar => Tensor::full(&info.shape, 1.0)?,
        };
        entries.push((info.name, t));
    }
    Ok(ParamSet::with_arch(spec.clone(), entries, Meta::new("init", seed))?)
}

fn check_input(spec: &ArchSpec, x: &Tensor) -> Result<(usize, usize, usize), GraphError> {
    let s = x.shape();
    if s.len() != 4 || s[1] != spec.in_channels() {
        return Err(GraphError::InputShape {
            got: s.to_vec(),
            channels: spec.in_channels(),
        });
    }
    Ok((s[0], s[2], s[3]))
}

/// Runs the network on an NCHW batch.
pub fn forward(
    spec: &ArchSpec,
    params: &ParamSet,
    x: &Tensor,
    mode: Mode,
) -> Result<(Tensor, Cache), GraphError> {
    spec.validate()?;
    let slots = LayerSlots::resolve(spec, params)?;
    let (n, h, w) = check_input(spec, x)?;
    let hw = h * w;
    let entries = params.entries();

    let mut acts: Vec<Vec<f32>> = Vec::with_capacity(spec.layers.len() + 1);
    acts.push(swap_leading(x.data(), n, spec.in_channels(), hw));
    let mut bn = vec![None; spec.layers.len()];
    let mut channels = spec.in_channels();

    for (i, layer) in spec.layers.iter().enumerate() {
        let input = acts.last().expect("input pushed above");
        let out = match (*layer, slots.0[i]) {
            (LayerSpec::Conv { in_ch, out_ch, kernel, .. }, Slot::Conv { weight, bias }) => {
                let g = ConvGeom { c_in: in_ch, c_out: out_ch, k: kernel, h, w };
                let mut out = vec![0.0f32; out_ch * n * hw];
                conv::forward(
                    &g,
                    n,
                    input,
                    entries[weight].1.data(),
                    bias.map(|b| entries[b].1.data()),
                    &mut out,
                );
                channels = out_ch;
                out
            }
            (LayerSpec::ReLU, _) => input.iter().map(|&v| v.max(0.0)).collect(),
            (LayerSpec::BatchNorm { eps, .. }, Slot::Bn { gamma, beta, mean, var }) => {
                let gamma = entries[gamma].1.data();
                let beta = entries[beta].1.data();
                let stats = match mode {
                    Mode::Train => batch_stats(input, channels, eps),
                    Mode::Eval => BnStats {
                        mean: entries[mean].1.data().to_vec(),
                        inv_std: entries[var]
                            .1
                            .data()
                            .iter()
                            .map(|&v| 1.0 / (v + eps).sqrt())
                            .collect(),
                        batch_var: None,
                    },
                };
                let plane = n * hw;
                let mut out = vec![0.0f32; input.len()];
                for c in 0..channels {
                    let range = c * plane..(c + 1) * plane;
                    let (m, s) = (stats.mean[c], stats.inv_std[c]);
                    let (gm, bt) = (gamma[c], beta[c]);
                    for (o, &v) in out[range.clone()].iter_mut().zip(&input[range]) {
                        *o = gm * ((v - m) * s) + bt;
                    }
                }
                bn[i] = Some(stats);
                out
            }
            _ => unreachable!("slots resolved from the same spec"),
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(GraphError::NonFinite { layer: i });
        }
        acts.push(out);
    }

    let raw = swap_leading(acts.last().expect("at least one layer"), channels, n, hw);
    let y = if spec.residual_output {
        x.data().iter().zip(&raw).map(|(a, b)| a - b).collect()
    } else {
        raw
    };
    let y = Tensor::new(vec![n, channels, h, w], y)?;
    let cache = Cache {
        arch_id: spec.arch_id.clone(),
        mode,
        params_checksum: params.checksum(),
        batch: n,
        h,
        w,
        acts,
        bn,
    };
    Ok((y, cache))
}

/// `[a, b, inner]` -> `[b, a, inner]`; converts between NCHW and the
/// channel-major layout used internally.
fn swap_leading(data: &[f32], a: usize, b: usize, inner: usize) -> Vec<f32> {
    if a == 1 || b == 1 {
        return data.to_vec();
    }
    let mut out = vec![0.0f32; data.len()];
    for i in 0..a {
        for j in 0..b {
            let src = (i * b + j) * inner;
            let dst = (j * a + i) * inner;
            out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
        }
    }
    out
}

fn batch_stats(input: &[f32], channels: usize, eps: f32) -> BnStats {
    let plane_len = input.len() / channels;
    let count = plane_len as f64;
    let mut mean = vec![0.0f32; channels];
    let mut inv_std = vec![0.0f32; channels];
    let mut var = vec![0.0f32; channels];
    for c in 0..channels {
        let plane = &input[c * plane_len..(c + 1) * plane_len];
        let s: f64 = plane.iter().map(|&v| v as f64).sum();
        let m = s / count;
        let ss: f64 = plane.iter().map(|&v| (v as f64 - m).powi(2)).sum();
        let v = ss / count;
        mean[c] = m as f32;
        var[c] = v as f32;
        inv_std[c] = (1.0 / (v + eps as f64).sqrt()) as f32;
    }
    BnStats {
        mean,
        inv_std,
        batch_var: Some(var),
    }
}

/// Reverse-mode gradients of `sum(grad_y * y)` with respect to every
/// parameter. Running statistics receive zero gradient.
pub fn backward(
    spec: &ArchSpec,
    params: &ParamSet,
    cache: &Cache,
    grad_y: &Tensor,
) -> Result<Gradients, GraphError> {
    let slots = LayerSlots::resolve(spec, params)?;
    if cache.arch_id != spec.arch_id || cache.acts.len() != spec.layers.len() + 1 {
        return Err(GraphError::StaleCache(format!(
            "cache was built for `{}`",
            cache.arch_id
        )));
    }
    if cache.params_checksum != params.checksum() {
        return Err(GraphError::StaleCache(
            "parameters changed since the forward pass".into(),
        ));
    }
    let out_ch = spec.out_channels();
    let expect = [cache.batch, out_ch, cache.h, cache.w];
    if grad_y.shape() != expect {
        return Err(GraphError::StaleCache(format!(
            "grad_y shape {:?}, forward produced {:?}",
            grad_y.shape(),
            expect
        )));
    }
    let (n, h, w) = (cache.batch, cache.h, cache.w);
    let hw = h * w;
    let entries = params.entries();
    let mut grads: Vec<Vec<f32>> = entries.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();

    let mut g = swap_leading(grad_y.data(), n, out_ch, hw);
    if spec.residual_output {
        g.iter_mut().for_each(|v| *v = -*v);
    }

    // channel count of each layer's input
    let mut in_channels = Vec::with_capacity(spec.layers.len());
    let mut c = spec.in_channels();
    for layer in &spec.layers {
        in_channels.push(c);
        if let LayerSpec::Conv { out_ch, .. } = layer {
            c = *out_ch;
        }
    }

    for (i, layer) in spec.layers.iter().enumerate().rev() {
        let input = &cache.acts[i];
        match (*layer, slots.0[i]) {
            (LayerSpec::Conv { in_ch, out_ch, kernel, .. }, Slot::Conv { weight, bias }) => {
                let geom = ConvGeom { c_in: in_ch, c_out: out_ch, k: kernel, h, w };
                let need_input_grad = i > 0;
                let mut gi = if need_input_grad { vec![0.0f32; in_ch * n * hw] } else { Vec::new() };
                let (gw, gb) = split_two(&mut grads, weight, bias);
                conv::backward(
                    &geom,
                    n,
                    input,
                    entries[weight].1.data(),
                    &g,
                    gw,
                    gb,
                    need_input_grad.then_some(gi.as_mut_slice()),
                );
                g = gi;
            }
            (LayerSpec::ReLU, _) => {
                let out = &cache.acts[i + 1];
                for (gv, &o) in g.iter_mut().zip(out) {
                    if o <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            (LayerSpec::BatchNorm { .. }, Slot::Bn { gamma, beta, .. }) => {
                let stats = cache.bn[i]
                    .as_ref()
                    .ok_or_else(|| GraphError::StaleCache(format!("layer {i} has no statistics")))?;
                let channels = in_channels[i];
                let gamma_v = entries[gamma].1.data();
                let plane = n * hw;
                let count = plane as f64;
                let mut dgamma = vec![0.0f64; channels];
                let mut dbeta = vec![0.0f64; channels];
                for ch in 0..channels {
                    let range = ch * plane..(ch + 1) * plane;
                    let (m, s, gm) = (stats.mean[ch], stats.inv_std[ch], gamma_v[ch]);
                    for (&gv, &xv) in g[range.clone()].iter().zip(&input[range.clone()]) {
                        let xhat = (xv - m) * s;
                        dgamma[ch] += gv as f64 * xhat as f64;
                        dbeta[ch] += gv as f64;
                    }
                    let seg = &mut g[range.clone()];
                    match cache.mode {
                        Mode::Train => {
                            let mdb = (dbeta[ch] / count) as f32;
                            let mdg = (dgamma[ch] / count) as f32;
                            for (gv, &xv) in seg.iter_mut().zip(&input[range]) {
                                let xhat = (xv - m) * s;
                                *gv = gm * s * (*gv - mdb - xhat * mdg);
                            }
                        }
                        Mode::Eval => {
                            for gv in seg.iter_mut() {
                                *gv *= gm * s;
                            }
                        }
                    }
                }
                for ch in 0..channels {
                    grads[gamma][ch] = dgamma[ch] as f32;
                    grads[beta][ch] = dbeta[ch] as f32;
                }
            }
            _ => unreachable!("slots resolved from the same spec"),
        }
    }

    let entries = entries
        .iter()
        .zip(grads)
        .map(|((name, t), data)| Ok((name.clone(), Tensor::new(t.shape().to_vec(), data)?)))
        .collect::<Result<Vec<_>, TensorError>>()?;
    Ok(Gradients { entries })
}

fn split_two(
    grads: &mut [Vec<f32>],
    first: usize,
    second: Option<usize>,
) -> (&mut [f32], Option<&mut [f32]>) {
    match second {
        None => (grads[first].as_mut_slice(), None),
        Some(s) => {
            debug_assert!(s > first);
            let (lo, hi) = grads.split_at_mut(s);
            (lo[first].as_mut_slice(), Some(hi[0].as_mut_slice()))
        }
    }
}

/// Absorbs every batch-norm layer into the convolution right before it.
///
/// With `s = gamma / sqrt(running_var + eps)`, the folded convolution uses
/// `W' = s * W` (per output channel) and `b' = s * (b - running_mean) + beta`.
/// The result reproduces eval-mode outputs of the original network.
pub fn fold_bn(spec: &ArchSpec, params: &ParamSet) -> Result<(ArchSpec, ParamSet), GraphError> {
    spec.validate()?;
    let slots = LayerSlots::resolve(spec, params)?;
    if !spec.has_batch_norm() {
        return Err(GraphError::NoBatchNorm);
    }
    let entries = params.entries();
    let mut layers = Vec::new();
    let mut tensors: Vec<Tensor> = Vec::new();
    let mut i = 0;
    while i < spec.layers.len() {
        match (spec.layers[i], slots.0[i]) {
            (LayerSpec::Conv { in_ch, out_ch, kernel, .. }, Slot::Conv { weight, bias }) => {
                let mut wt = entries[weight].1.clone();
                let mut b: Vec<f32> = match bias {
                    Some(b) => entries[b].1.data().to_vec(),
                    None => vec![0.0; out_ch],
                };
                let next_bn = match spec.layers.get(i + 1) {
                    Some(LayerSpec::BatchNorm { eps, .. }) => Some((*eps, slots.0[i + 1])),
                    _ => None,
                };
                if let Some((eps, Slot::Bn { gamma, beta, mean, var })) = next_bn {
                    let per_out = wt.numel() / out_ch;
                    let (gm, bt) = (entries[gamma].1.data(), entries[beta].1.data());
                    let (rm, rv) = (entries[mean].1.data(), entries[var].1.data());
                    for o in 0..out_ch {
                        let denom = rv[o] as f64 + eps as f64;
                        if denom.is_nan() || denom <= 0.0 {
                            return Err(GraphError::NonPositiveVariance { layer: i + 1, channel: o });
                        }
                        let s = gm[o] as f64 / denom.sqrt();
                        for v in &mut wt.data_mut()[o * per_out..(o + 1) * per_out] {
                            *v = (*v as f64 * s) as f32;
                        }
                        b[o] = ((b[o] as f64 - rm[o] as f64) * s + bt[o] as f64) as f32;
                    }
                    i += 1;
                }
                layers.push(LayerSpec::conv(in_ch, out_ch, kernel, true));
                tensors.push(wt);
                tensors.push(Tensor::new(vec![out_ch], b)?);
            }
            (LayerSpec::ReLU, _) => layers.push(LayerSpec::ReLU),
            (LayerSpec::BatchNorm { .. }, _) => return Err(GraphError::BnWithoutConv { layer: i }),
            _ => unreachable!("slots resolved from the same spec"),
        }
        i += 1;
    }
    let folded = ArchSpec {
        arch_id: format!("{}-folded", spec.arch_id),
        layers,
        residual_output: spec.residual_output,
    };
    let names = folded.param_layout().into_iter().map(|p| p.name);
    let entries = names.zip(tensors).collect();
    let p = ParamSet::with_arch(folded.clone(), entries, params.meta.clone())?;
    Ok((folded, p))
}

#[cfg(test)]
mod tests;
