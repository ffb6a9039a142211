//! Independent f64 reference implementation of the network forward pass,
//! written with plain nested loops in NCHW layout. Used as the oracle for
//! finite-difference gradient checks.

#![allow(dead_code)]

use dni_core::netgraph::BN_EPS;
use dni_core::rng::Rng;
use dni_core::{ArchSpec, LayerSpec, Mode, ParamSet, Tensor};

/// Parameters as f64 vectors, in `ParamSet` order.
pub fn params_f64(p: &ParamSet) -> Vec<Vec<f64>> {
    p.tensors().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect()
}

/// Forward pass in f64. Returns the output (NCHW) and the sign pattern of
/// every ReLU input, so callers can detect kinks crossed by a perturbation.
pub fn reference_forward(
    spec: &ArchSpec,
    params: &[Vec<f64>],
    x: &[f64],
    shape: [usize; 4],
    mode: Mode,
) -> (Vec<f64>, Vec<bool>) {
    let [n, c0, h, w] = shape;
    let mut act = x.to_vec();
    let mut c = c0;
    let mut idx = 0;
    let mut pattern = Vec::new();
    for layer in &spec.layers {
        match *layer {
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                has_bias,
            } => {
                assert_eq!(in_ch, c);
                let wt = &params[idx];
                let bias = has_bias.then(|| &params[idx + 1]);
                idx += 1 + has_bias as usize;
                let pad = (kernel / 2) as isize;
                let mut out = vec![0.0; n * out_ch * h * w];
                for img in 0..n {
                    for o in 0..out_ch {
                        for y in 0..h {
                            for xx in 0..w {
                                let mut s = bias.map_or(0.0, |b| b[o]);
                                for ci in 0..in_ch {
                                    for ki in 0..kernel {
                                        for kj in 0..kernel {
                                            let iy = y as isize + ki as isize - pad;
                                            let ix = xx as isize + kj as isize - pad;
                                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                                continue;
                                            }
                                            let v = act[((img * in_ch + ci) * h + iy as usize) * w + ix as usize];
                                            s += v * wt[((o * in_ch + ci) * kernel + ki) * kernel + kj];
                                        }
                                    }
                                }
                                out[((img * out_ch + o) * h + y) * w + xx] = s;
                            }
                        }
                    }
                }
                act = out;
                c = out_ch;
            }
            LayerSpec::ReLU => {
                pattern.extend(act.iter().map(|&v| v > 0.0));
                act.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            LayerSpec::BatchNorm { channels, eps, .. } => {
                assert_eq!(eps, BN_EPS);
                let (gamma, beta) = (&params[idx], &params[idx + 1]);
                let (rm, rv) = (&params[idx + 2], &params[idx + 3]);
                idx += 4;
                let hw = h * w;
                for ch in 0..channels {
                    let vals: Vec<f64> = (0..n)
                        .flat_map(|img| {
                            let base = (img * channels + ch) * hw;
                            act[base..base + hw].to_vec()
                        })
                        .collect();
                    let (mean, var) = match mode {
                        Mode::Train => {
                            let m = vals.iter().sum::<f64>() / vals.len() as f64;
                            let v = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
                            (m, v)
                        }
                        Mode::Eval => (rm[ch], rv[ch]),
                    };
                    let inv = 1.0 / (var + eps as f64).sqrt();
                    for img in 0..n {
                        let base = (img * channels + ch) * hw;
                        for v in &mut act[base..base + hw] {
                            *v = gamma[ch] * (*v - mean) * inv + beta[ch];
                        }
                    }
                }
            }
        }
    }
    let out = if spec.residual_output {
        x.iter().zip(&act).map(|(a, b)| a - b).collect()
    } else {
        act
    };
    (out, pattern)
}

pub fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| (rng.normal() * scale) as f32).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Replaces every tensor with random values (running variances positive).
pub fn randomize(spec: &ArchSpec, p: &ParamSet, rng: &mut Rng) -> ParamSet {
    let entries = spec
        .param_layout()
        .into_iter()
        .zip(p.tensors())
        .map(|(info, t)| {
            let mut r = random_tensor(rng, t.shape(), 0.5);
            if info.name.ends_with("running_var") || info.name.ends_with("gamma") {
                r = r.map(|v| 0.5 + v.abs());
            }
            (info.name, r)
        })
        .collect();
    ParamSet::with_arch(spec.clone(), entries, p.meta.clone()).unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose perturbation flipped a ReLU; central differences
    /// are meaningless there.
    pub skipped: usize,
}

pub const FD_STEP: f64 = 1e-3;

/// Central differences on `L = sum(r * y)` for a fixed random `r`, against
/// the analytic gradient of every trainable parameter.
pub fn gradcheck(spec: &ArchSpec, params: &ParamSet, x: &Tensor, mode: Mode, seed: u64) -> GradCheck {
    use dni_core::netgraph::{backward, forward};
    let mut rng = Rng::new(seed);
    let (y, cache) = forward(spec, params, x, mode).unwrap();
    let r = random_tensor(&mut rng, y.shape(), 1.0);
    let grads = backward(spec, params, &cache, &r).unwrap();
    let rf: Vec<f64> = r.data().iter().map(|&v| v as f64).collect();
    let xf: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let shape: [usize; 4] = x.shape().try_into().unwrap();
    let loss = |p: &[Vec<f64>]| {
        let (out, pat) = reference_forward(spec, p, &xf, shape, mode);
        (out.iter().zip(&rf).map(|(a, b)| a * b).sum::<f64>(), pat)
    };
    let base = params_f64(params);
    let mut report = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (k, info) in spec.param_layout().iter().enumerate() {
        let analytic = grads.get(&info.name).unwrap().data();
        if !info.kind.trainable() {
            assert!(analytic.iter().all(|&g| g == 0.0), "{} has a gradient", info.name);
            continue;
        }
        for i in 0..analytic.len() {
            let mut plus = base.clone();
            plus[k][i] += FD_STEP;
            let mut minus = base.clone();
            minus[k][i] -= FD_STEP;
            let (lp, pp) = loss(&plus);
            let (lm, pm) = loss(&minus);
            if pp != pm {
                report.skipped += 1;
                continue;
            }
            let num = (lp - lm) / (2.0 * FD_STEP);
            let ana = analytic[i] as f64;
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-3);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    report
}
