use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn dni(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dni"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "1546300800")
        .output()
        .expect("spawn dni")
}

fn ok(args: &[&str]) -> String {
    let out = dni(args);
    assert!(
        out.status.success(),
        "dni {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_train(dir: &Path, name: &str, sigma: &str, seed: &str) -> PathBuf {
    let out = dir.join(name);
    let manifest = repo().join("data/train.txt");
    ok(&[
        "train", "--arch", "dncnn3-w4", "--sigma", sigma, "--data", s(&manifest), "--iters", "3", "--batch", "2",
        "--patch", "16", "--seed", seed, "--log-every", "1", "--log", s(&dir.join(format!("{name}.log"))), "--out",
        s(&out),
    ]);
    out
}

#[test]
fn train_finetune_interp_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let a = tiny_train(dir.path(), "a.dnic", "20", "1");
    let log = std::fs::read_to_string(dir.path().join("a.dnic.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("1,"));

    // same seed, same bytes
    let again = tiny_train(dir.path(), "again.dnic", "20", "1");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&again).unwrap());

    let b = dir.path().join("b.dnic");
    let manifest = repo().join("data/train.txt");
    ok(&[
        "finetune", "--from", s(&a), "--sigma", "60", "--data", s(&manifest), "--iters", "2", "--batch", "2",
        "--patch", "16", "--log", s(&dir.path().join("b.log")), "--out", s(&b),
    ]);

    let mid = dir.path().join("mid.dnic");
    let out = dni(&["interp", "--models", &format!("{},{}", s(&a), s(&b)), "--alphas", "0.5,0.5", "--out", s(&mid)]);
    assert!(out.status.success());
    assert!(out.stderr.is_empty(), "related models should not warn");
    let mid_sum = String::from_utf8(out.stdout).unwrap();
    assert_eq!(mid_sum.trim().len(), 16);

    let end = dir.path().join("end.dnic");
    ok(&["interp", "--models", &format!("{},{}", s(&a), s(&b)), "--alphas", "1,0", "--out", s(&end)]);
    let pa = dni_core::checkpoint::load(&a).unwrap();
    let pe = dni_core::checkpoint::load(&end).unwrap();
    assert!(pa.tensors().zip(pe.tensors()).all(|(x, y)| x.bit_eq(y)));
}

#[test]
fn unrelated_models_warn_and_bad_alphas_fail() {
    let dir = tempfile::tempdir().unwrap();
    let a = tiny_train(dir.path(), "a.dnic", "20", "1");
    let c = tiny_train(dir.path(), "c.dnic", "20", "2");
    let models = format!("{},{}", s(&a), s(&c));
    let out = dni(&["interp", "--models", &models, "--alphas", "0.3,0.7", "--out", s(&dir.path().join("m.dnic"))]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));

    let bad = dni(&["interp", "--models", &models, "--alphas", "0.3,0.3", "--out", s(&dir.path().join("x.dnic"))]);
    assert!(!bad.status.success());
    let neg = dni(&["interp", "--models", &models, "--alphas", "1.5,-0.5", "--out", s(&dir.path().join("x.dnic"))]);
    assert!(!neg.status.success());
    assert!(!dir.path().join("x.dnic").exists());
}

#[test]
fn noise_psnr_denoise() {
    let dir = tempfile::tempdir().unwrap();
    let clean = repo().join("data/test/camera.png");
    assert_eq!(ok(&["psnr", "--ref", s(&clean), "--test", s(&clean)]).trim(), "inf");

    let noisy = dir.path().join("noisy.png");
    ok(&["noise", "--in", s(&clean), "--sigma", "20", "--seed", "3", "--out", s(&noisy)]);
    let db: f64 = ok(&["psnr", "--ref", s(&clean), "--test", s(&noisy)]).trim().parse().unwrap();
    // sigma 20 on 0..255 is about 22.1 dB before clipping
    assert!((21.5..23.5).contains(&db), "{db}");

    let again = dir.path().join("again.png");
    ok(&["noise", "--in", s(&clean), "--sigma", "20", "--seed", "3", "--out", s(&again)]);
    assert_eq!(std::fs::read(&noisy).unwrap(), std::fs::read(&again).unwrap());

    let model = tiny_train(dir.path(), "m.dnic", "20", "4");
    let den = dir.path().join("den.png");
    let out = ok(&["denoise", "--model", s(&model), "--in", s(&noisy), "--out", s(&den), "--ref", s(&clean)]);
    assert!(out.starts_with("PSNR "), "{out}");
    assert!(den.exists());
}

#[test]
fn fold_bn_and_correlate() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = repo().join("data/train.txt");
    let bn = dir.path().join("bn.dnic");
    ok(&[
        "train", "--arch", "dncnn3-bn-w4", "--sigma", "20", "--data", s(&manifest), "--iters", "2", "--batch", "2",
        "--patch", "16", "--log", s(&dir.path().join("bn.log")), "--out", s(&bn),
    ]);
    let folded = dir.path().join("folded.dnic");
    ok(&["fold-bn", "--in", s(&bn), "--out", s(&folded)]);
    let p = dni_core::checkpoint::load(&folded).unwrap();
    assert!(p.entries().iter().all(|(n, _)| n.starts_with("conv")));

    let report = dir.path().join("corr.json");
    let out = ok(&["correlate", "--models", s(&bn), "--ref", s(&bn), "--layer", "conv0", "--out", s(&report)]);
    assert!(out.contains("median 1.0000"), "{out}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json[0]["median"], 1.0);
}

#[test]
fn rejects_unknown_arch_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = repo().join("data/train.txt");
    let out = dni(&[
        "train", "--arch", "resnet50", "--sigma", "20", "--data", s(&manifest), "--iters", "1", "--out",
        s(&dir.path().join("x.dnic")),
    ]);
    assert!(!out.status.success());
    let out = dni(&["fold-bn", "--in", s(&dir.path().join("missing.dnic")), "--out", s(&dir.path().join("y.dnic"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.dnic"));
}
