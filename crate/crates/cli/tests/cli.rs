use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mork_core::container::ModelContainer;
use mork_core::model::{LayerDesc, QuantModel};
use mork_core::synth;
use mork_core::tensor::Shape;
use mork_core::tensor_file::write_batch;
use tempfile::TempDir;

fn mork(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mork"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = mork(dir, args);
    assert!(
        out.status.success(),
        "mork {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// One ReLU layer of uniform-magnitude weights fed +-1 inputs: every
/// pre-activation is exactly 3x its binary counterpart.
fn affine_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let (n, k) = (12, 32);
    let w: Vec<i8> = (0..n * k).map(|i| if (i * 7 + i / 5) % 3 == 0 { -3 } else { 3 }).collect();
    let layer = LayerDesc::fc(n, k, w).unwrap().with_relu(true);
    let model = QuantModel::new(Shape::new(vec![k]), vec![layer]).unwrap();
    let samples = synth::sign_batch(&model, 64, 1, 9);
    let (m, s) = (dir.join("affine.mork"), dir.join("affine.mrkt"));
    ModelContainer::new(model, None, None).unwrap().save(&m).unwrap();
    write_batch(&s, &samples).unwrap();
    (m, s)
}

#[test]
fn affine_fixture_calibrates_to_unit_correlation() {
    let dir = TempDir::new().unwrap();
    affine_fixture(dir.path());
    ok(
        dir.path(),
        &["calibrate", "--model", "affine.mork", "--samples", "affine.mrkt", "--threshold", "0.9", "--out", "p.mork"],
    );
    let c = ModelContainer::load(dir.path().join("p.mork")).unwrap();
    let params = c.params.unwrap();
    assert!(params.layers[0].iter().all(|p| p.c() == 1.0 && p.enabled()));
}

#[test]
fn threshold_one_disables_everything() {
    let dir = TempDir::new().unwrap();
    affine_fixture(dir.path());
    ok(
        dir.path(),
        &["calibrate", "--model", "affine.mork", "--samples", "affine.mrkt", "--threshold", "1.0", "--out", "p.mork"],
    );
    let c = ModelContainer::load(dir.path().join("p.mork")).unwrap();
    assert_eq!(c.params.unwrap().enabled_count(), 0);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    for tag in ["a", "b"] {
        let (m, s, c, p) = (
            format!("{tag}.mork"),
            format!("{tag}.mrkt"),
            format!("{tag}c.mork"),
            format!("{tag}p.mork"),
        );
        ok(d, &["--seed", "5", "synth", "--model", &m, "--samples", &s, "--count", "32"]);
        ok(d, &["cluster", "--model", &m, "--out", &c]);
        ok(d, &["calibrate", "--model", &c, "--samples", &s, "--out", &p]);
        ok(d, &["sweep", "--model", &p, "--inputs", &s, "--thresholds", "1,0.8", "--out", &format!("{tag}.csv")]);
    }
    for f in ["a.mrkt", "ap.mork", "a.csv"] {
        let other = f.replacen('a', "b", 1);
        assert_eq!(std::fs::read(d.join(f)).unwrap(), std::fs::read(d.join(other)).unwrap(), "{f}");
    }
}

#[test]
fn sim_and_report_pipeline() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "1", "synth", "--model", "m.mork", "--samples", "s.mrkt", "--count", "8"]);
    ok(d, &["cluster", "--model", "m.mork", "--out", "c.mork"]);
    ok(d, &["calibrate", "--model", "c.mork", "--samples", "s.mrkt", "--threshold", "0.7", "--out", "p.mork"]);
    std::fs::write(d.join("cfg.toml"), "[accel]\nnum_cus = 4\n\n[cost]\ndram_byte = 10.0\n").unwrap();
    ok(d, &["--config", "cfg.toml", "sim", "--model", "p.mork", "--inputs", "s.mrkt", "--mode", "off", "--out", "off.jsonl"]);
    ok(d, &["--config", "cfg.toml", "--oracle", "sim", "--model", "p.mork", "--inputs", "s.mrkt", "--out", "on.jsonl"]);
    let out = ok(d, &["report", "off.jsonl", "on.jsonl", "--csv", "r.csv"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("speedup"));
    let csv = std::fs::read_to_string(d.join("r.csv")).unwrap();
    assert!(csv.starts_with("layer,cycles_base,cycles_pred,speedup,"));
    assert_eq!(csv.lines().count(), 1 + 4 + 1);

    let same = ok(d, &["report", "off.jsonl", "off.jsonl"]);
    assert!(String::from_utf8(same.stdout).unwrap().contains("1.00x"));
}

#[test]
fn errors_exit_nonzero() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "1", "synth", "--model", "m.mork", "--samples", "s.mrkt", "--count", "4"]);
    ok(d, &["--seed", "2", "synth", "--model", "n.mork", "--samples", "t.mrkt", "--count", "4"]);
    // Empty threshold list is a usage error.
    let empty = mork(d, &["sweep", "--model", "m.mork", "--inputs", "s.mrkt", "--thresholds", ""]);
    assert_eq!(empty.status.code(), Some(2));
    // No parameters yet.
    assert!(!mork(d, &["run", "--model", "m.mork", "--inputs", "s.mrkt"]).status.success());
    // Out-of-range threshold.
    assert!(!mork(d, &["calibrate", "--model", "m.mork", "--samples", "s.mrkt", "--threshold", "1.5", "--out", "x.mork"])
        .status
        .success());
    // Bad config key.
    std::fs::write(d.join("bad.toml"), "[accel]\nwarp_drive = 1\n").unwrap();
    assert!(!mork(d, &["--config", "bad.toml", "sim", "--model", "m.mork", "--inputs", "s.mrkt", "--mode", "off", "--out", "o.jsonl"])
        .status
        .success());
    // Paired runs of different models.
    ok(d, &["sim", "--model", "m.mork", "--inputs", "s.mrkt", "--mode", "off", "--out", "a.jsonl"]);
    ok(d, &["sim", "--model", "n.mork", "--inputs", "t.mrkt", "--mode", "off", "--out", "b.jsonl"]);
    let r = mork(d, &["report", "a.jsonl", "b.jsonl"]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("hash"));
    // Truncated container.
    let bytes = std::fs::read(d.join("m.mork")).unwrap();
    std::fs::write(d.join("cut.mork"), &bytes[..bytes.len() / 2]).unwrap();
    let cut = mork(d, &["cluster", "--model", "cut.mork", "--out", "y.mork"]);
    assert!(String::from_utf8_lossy(&cut.stderr).contains("parse error at byte"));
}
