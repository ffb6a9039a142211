use super::*;
use crate::tensor::stats;

fn single_conv(kernel: usize, bias: bool) -> ArchSpec {
    ArchSpec {
        arch_id: "single".into(),
        layers: vec![LayerSpec::conv(1, 1, kernel, bias)],
        residual_output: false,
    }
}

fn with_tensors(spec: &ArchSpec, tensors: Vec<Tensor>) -> ParamSet {
    let names = spec.param_layout().into_iter().map(|p| p.name);
    ParamSet::with_arch(spec.clone(), names.zip(tensors).collect(), Meta::new("t", 0)).unwrap()
}

fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect()).unwrap()
}

#[test]
fn delta_kernel_is_identity() {
    let spec = single_conv(3, true);
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let p = with_tensors(
        &spec,
        vec![Tensor::new(vec![1, 1, 3, 3], k).unwrap(), Tensor::zeros(&[1]).unwrap()],
    );
    let x = random_input(&[1, 1, 6, 5], 1);
    let (y, _) = forward(&spec, &p, &x, Mode::Eval).unwrap();
    assert!(y.bit_eq(&x));
}

#[test]
fn ones_kernel_on_constant_image() {
    let spec = single_conv(3, false);
    let p = with_tensors(&spec, vec![Tensor::full(&[1, 1, 3, 3], 1.0).unwrap()]);
    let x = Tensor::full(&[1, 1, 5, 5], 5.0).unwrap();
    let (y, _) = forward(&spec, &p, &x, Mode::Eval).unwrap();
    for r in 1..4 {
        for c in 1..4 {
            assert_eq!(y.data()[r * 5 + c], 45.0);
        }
    }
    // corners see 4 taps, edges 6
    assert_eq!(y.data()[0], 20.0);
    assert_eq!(y.data()[2], 30.0);
}

#[test]
fn init_is_deterministic_with_stated_defaults() {
    let spec = ArchSpec::dncnn(4, 8, true).unwrap();
    let a = init_params(&spec, 5).unwrap();
    let b = init_params(&spec, 5).unwrap();
    assert_eq!(a, b);
    assert!(a.entries().iter().zip(b.entries()).all(|((_, x), (_, y))| x.bit_eq(y)));
    assert_ne!(a, init_params(&spec, 6).unwrap());
    let bn = "bn3";
    assert!(a.get(&format!("{bn}.gamma")).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(a.get(&format!("{bn}.beta")).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(a.get(&format!("{bn}.running_mean")).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(a.get(&format!("{bn}.running_var")).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(a.get("conv0.bias").unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn init_weight_spread_matches_uniform_distribution() {
    // 3x3, 64 -> 64: fan_in 576, U(-1/24, 1/24) has std 1/sqrt(3 * 576).
    let spec = ArchSpec {
        arch_id: "wide".into(),
        layers: vec![LayerSpec::conv(64, 64, 3, true)],
        residual_output: false,
    };
    let p = init_params(&spec, 77).unwrap();
    let w = p.get("conv0.weight").unwrap();
    assert!(w.numel() >= 10_000);
    let (mean, norm) = stats(w);
    let std = norm / (w.numel() as f64).sqrt();
    let expected = 1.0 / (3.0f64 * 576.0).sqrt();
    assert!(mean.abs() < 0.05 * expected);
    assert!((std - expected).abs() < 0.1 * expected, "std {std} vs {expected}");
    let bound = 1.0 / 24.0;
    assert!(w.data().iter().all(|&v| (v as f64).abs() <= bound));
}

#[test]
fn eval_forward_is_bit_deterministic() {
    let spec = ArchSpec::dncnn(4, 4, true).unwrap();
    let p = init_params(&spec, 1).unwrap();
    let x = random_input(&[2, 1, 7, 6], 2);
    let (a, _) = forward(&spec, &p, &x, Mode::Eval).unwrap();
    let (b, _) = forward(&spec, &p, &x, Mode::Eval).unwrap();
    assert!(a.bit_eq(&b));
}

#[test]
fn residual_with_zero_branch_returns_input() {
    let spec = ArchSpec::dncnn(3, 4, false).unwrap();
    let mut p = init_params(&spec, 3).unwrap();
    let last = p.len() - 2;
    p.tensor_at_mut(last).data_mut().fill(0.0);
    let x = random_input(&[1, 1, 5, 5], 4);
    let (y, _) = forward(&spec, &p, &x, Mode::Eval).unwrap();
    assert!(y.bit_eq(&x));
}

#[test]
fn input_and_param_mismatch_errors() {
    let spec = ArchSpec::dncnn(3, 4, false).unwrap();
    let p = init_params(&spec, 3).unwrap();
    let bad = Tensor::zeros(&[1, 2, 5, 5]).unwrap();
    assert!(matches!(
        forward(&spec, &p, &bad, Mode::Eval),
        Err(GraphError::InputShape { .. })
    ));
    let other = ArchSpec::dncnn(4, 4, false).unwrap();
    let x = Tensor::zeros(&[1, 1, 5, 5]).unwrap();
    assert!(matches!(
        forward(&other, &p, &x, Mode::Eval),
        Err(GraphError::ParamMismatch(_))
    ));
}

#[test]
fn non_finite_activation_reports_layer() {
    let spec = single_conv(3, false);
    let p = with_tensors(&spec, vec![Tensor::full(&[1, 1, 3, 3], 3e38).unwrap()]);
    let x = Tensor::full(&[1, 1, 3, 3], 10.0).unwrap();
    assert!(matches!(
        forward(&spec, &p, &x, Mode::Eval),
        Err(GraphError::NonFinite { layer: 0 })
    ));
}

#[test]
fn zero_upstream_gradient_gives_zero_gradients() {
    let spec = ArchSpec::dncnn(4, 4, true).unwrap();
    let p = init_params(&spec, 8).unwrap();
    let x = random_input(&[2, 1, 6, 6], 9);
    let (y, cache) = forward(&spec, &p, &x, Mode::Train).unwrap();
    let g = backward(&spec, &p, &cache, &Tensor::zeros(y.shape()).unwrap()).unwrap();
    assert_eq!(g.entries().len(), p.len());
    for ((gn, gt), (pn, pt)) in g.entries().iter().zip(p.entries()) {
        assert_eq!(gn, pn);
        assert_eq!(gt.shape(), pt.shape());
        assert!(gt.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn single_linear_conv_gradient_is_input_residual_correlation() {
    // loss = 1/2 * sum((y - t)^2), so grad_y = r = y - t and
    // dW[ki][kj] = sum_p r[p] * x[p + (ki - 1, kj - 1)], db = sum_p r[p].
    let spec = single_conv(3, true);
    let mut rng = Rng::new(21);
    let w: Vec<f32> = (0..9).map(|_| rng.uniform(-0.5, 0.5) as f32).collect();
    let p = with_tensors(
        &spec,
        vec![Tensor::new(vec![1, 1, 3, 3], w).unwrap(), Tensor::scalar(0.3)],
    );
    let (h, wd) = (6usize, 7usize);
    let x = random_input(&[1, 1, h, wd], 22);
    let t = random_input(&[1, 1, h, wd], 23);
    let (y, cache) = forward(&spec, &p, &x, Mode::Train).unwrap();
    let r: Vec<f64> = y.data().iter().zip(t.data()).map(|(a, b)| (*a - *b) as f64).collect();
    let g = backward(
        &spec,
        &p,
        &cache,
        &Tensor::new(vec![1, 1, h, wd], r.iter().map(|&v| v as f32).collect()).unwrap(),
    )
    .unwrap();
    let gw = g.get("conv0.weight").unwrap().data();
    for ki in 0..3 {
        for kj in 0..3 {
            let mut s = 0.0f64;
            for py in 0..h as isize {
                for px in 0..wd as isize {
                    let (iy, ix) = (py + ki as isize - 1, px + kj as isize - 1);
                    if iy >= 0 && ix >= 0 && iy < h as isize && ix < wd as isize {
                        s += r[py as usize * wd + px as usize]
                            * x.data()[iy as usize * wd + ix as usize] as f64;
                    }
                }
            }
            assert!((gw[ki * 3 + kj] as f64 - s).abs() < 1e-5, "tap ({ki},{kj})");
        }
    }
    let db: f64 = r.iter().sum();
    assert!((g.get("conv0.bias").unwrap().data()[0] as f64 - db).abs() < 1e-5);
}

#[test]
fn backward_rejects_stale_cache() {
    let spec = ArchSpec::dncnn(3, 4, false).unwrap();
    let p = init_params(&spec, 1).unwrap();
    let x = random_input(&[1, 1, 5, 5], 2);
    let (y, cache) = forward(&spec, &p, &x, Mode::Train).unwrap();
    let q = init_params(&spec, 2).unwrap();
    assert!(matches!(
        backward(&spec, &q, &cache, &y),
        Err(GraphError::StaleCache(_))
    ));
    let wrong = Tensor::zeros(&[1, 1, 4, 5]).unwrap();
    assert!(matches!(
        backward(&spec, &p, &cache, &wrong),
        Err(GraphError::StaleCache(_))
    ));
}

#[test]
fn running_stats_follow_momentum() {
    let spec = ArchSpec::dncnn(3, 2, true).unwrap();
    let mut p = init_params(&spec, 4).unwrap();
    let x = random_input(&[2, 1, 4, 4], 5);
    let (_, cache) = forward(&spec, &p, &x, Mode::Train).unwrap();
    let stats = cache.bn[3].clone().unwrap();
    cache.commit_running_stats(&spec, &mut p).unwrap();
    let rm = p.get("bn3.running_mean").unwrap().data();
    let rv = p.get("bn3.running_var").unwrap().data();
    for c in 0..2 {
        assert!((rm[c] - 0.1 * stats.mean[c]).abs() < 1e-7);
        let bv = stats.batch_var.as_ref().unwrap()[c];
        assert!((rv[c] - (0.9 + 0.1 * bv)).abs() < 1e-6);
    }
    // eval caches leave running stats alone
    let before = p.clone();
    let (_, ev) = forward(&spec, &p, &x, Mode::Eval).unwrap();
    ev.commit_running_stats(&spec, &mut p).unwrap();
    assert_eq!(before, p);
}

#[test]
fn fold_with_default_stats_only_rescales_by_eps() {
    let spec = ArchSpec::dncnn(3, 3, true).unwrap();
    let p = init_params(&spec, 10).unwrap();
    let (fspec, fp) = fold_bn(&spec, &p).unwrap();
    assert!(!fspec.has_batch_norm());
    let factor = 1.0 / (1.0f64 + 1e-5).sqrt();
    let orig = p.get("conv2.weight").unwrap().data();
    let folded = fp.get("conv2.weight").unwrap().data();
    for (o, f) in orig.iter().zip(folded) {
        assert!((*o as f64 * factor - *f as f64).abs() <= 1e-7 * (*o as f64).abs());
    }
    assert!(fp.get("conv2.bias").unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn fold_preserves_eval_outputs() {
    let spec = ArchSpec::dncnn(4, 4, true).unwrap();
    let mut p = init_params(&spec, 31).unwrap();
    let mut rng = Rng::new(32);
    for (name, t) in p.clone().entries() {
        let idx = p.entries().iter().position(|(n, _)| n == name).unwrap();
        let slot = p.tensor_at_mut(idx);
        if name.ends_with("running_var") {
            slot.data_mut().iter_mut().for_each(|v| *v = rng.uniform(0.2, 2.0) as f32);
        } else if name.starts_with("bn") {
            slot.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-1.0, 1.0) as f32);
        }
        let _ = t;
    }
    let (fspec, fp) = fold_bn(&spec, &p).unwrap();
    for seed in 0..5 {
        let x = random_input(&[1, 1, 8, 8], 100 + seed);
        let (a, _) = forward(&spec, &p, &x, Mode::Eval).unwrap();
        let (b, _) = forward(&fspec, &fp, &x, Mode::Eval).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-4);
    }
    assert!(matches!(fold_bn(&fspec, &fp), Err(GraphError::NoBatchNorm)));
}

#[test]
fn fold_rejects_bn_after_relu_and_bad_variance() {
    let spec = ArchSpec {
        arch_id: "odd".into(),
        layers: vec![LayerSpec::conv(1, 2, 3, true), LayerSpec::ReLU, LayerSpec::batch_norm(2)],
        residual_output: false,
    };
    let p = init_params(&spec, 1).unwrap();
    assert!(matches!(fold_bn(&spec, &p), Err(GraphError::BnWithoutConv { layer: 2 })));

    let spec = ArchSpec::dncnn(3, 2, true).unwrap();
    let mut p = init_params(&spec, 1).unwrap();
    let idx = p.entries().iter().position(|(n, _)| n == "bn3.running_var").unwrap();
    p.tensor_at_mut(idx).data_mut()[1] = -1.0;
    assert!(matches!(
        fold_bn(&spec, &p),
        Err(GraphError::NonPositiveVariance { layer: 3, channel: 1 })
    ));
}
