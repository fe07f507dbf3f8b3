//! End-to-end CLI tests on a miniature corpus: stage wiring, exit codes,
//! caching, and byte-level determinism of the audit report.

use std::path::Path;
use std::process::{Command, Output};

fn memaud(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memaud"))
        .arg("--data-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("memaud runs")
}

/// Overrides shrinking every stage so the full pipeline takes seconds.
fn tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "--set",
        "train_count=8",
        "--set",
        "val_count=6",
        "--set",
        "synth_multiplier=2",
        "--set",
        "autoencoder.epochs=2",
        "--set",
        "diffusion.epochs=2",
        "--set",
        "diffusion.t_steps=10",
        "--set",
        "embedder.epochs=2",
        "--set",
        "embedder.fine_tune_epochs=0",
    ];
    v.extend_from_slice(args);
    v
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn pipeline_runs_caches_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_ok(&memaud(d, &tiny(&["pipeline"])));
    for f in [
        "dataset.json",
        "checkpoints/ae.ckpt",
        "checkpoints/diff.ckpt",
        "checkpoints/con.ckpt",
        "synth.json",
        "reports/audit.json",
        "reports/audit.csv",
        "manifest.json",
    ] {
        assert!(d.join(f).exists(), "missing {f}");
    }
    let report1 = std::fs::read(d.join("reports/audit.json")).unwrap();
    let csv1 = std::fs::read(d.join("reports/audit.csv")).unwrap();

    // identical rerun is a cached no-op for every stage
    let out = memaud(d, &tiny(&["pipeline"]));
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(
        stdout.matches("up to date").count(),
        6,
        "expected all six stages cached:\n{stdout}"
    );

    // forced rerun reproduces the report byte-for-byte
    let mut forced = tiny(&["pipeline"]);
    forced.push("--force");
    assert_ok(&memaud(d, &forced));
    assert_eq!(report1, std::fs::read(d.join("reports/audit.json")).unwrap());
    assert_eq!(csv1, std::fs::read(d.join("reports/audit.csv")).unwrap());

    // a config change invalidates the dependent stages
    let out = memaud(d, &tiny(&["--set", "diffusion.epochs=3", "train-diff"]));
    assert_ok(&out);
    assert!(
        String::from_utf8_lossy(&out.stdout).contains("final training loss"),
        "changed config must retrain"
    );
}

#[test]
fn missing_dependency_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = memaud(dir.path(), &tiny(&["train-ae"]));
    assert_eq!(out.status.code(), Some(3));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("phantom"), "names the missing stage: {msg}");

    assert_ok(&memaud(dir.path(), &tiny(&["phantom"])));
    let out = memaud(dir.path(), &tiny(&["generate"]));
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-ae"));
}

#[test]
fn config_error_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = memaud(dir.path(), &["--set", "quantile=2.0", "phantom"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("quantile"));

    let out = memaud(dir.path(), &["--set", "no_such_field=1", "phantom"]);
    assert_eq!(out.status.code(), Some(2));

    let out = memaud(dir.path(), &["--config", "/nonexistent.json", "phantom"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg_path = d.join("run.json");
    std::fs::write(
        &cfg_path,
        serde_json::json!({
            "seed": 11,
            "train_count": 8,
            "val_count": 6,
            "phantom": {"max_shapes": 2}
        })
        .to_string(),
    )
    .unwrap();
    let out = memaud(
        d,
        &[
            "--config",
            cfg_path.to_str().unwrap(),
            "--set",
            "train_count=9",
            "phantom",
        ],
    );
    assert_ok(&out);
    // flags win over the file: 9 train + 6 val volumes
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(manifest["entries"].as_array().unwrap().len(), 15);
    // the effective config is echoed into the run manifest
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(run["config"]["train_count"], 9);
    assert_eq!(run["config"]["seed"], 11);
    assert_eq!(run["config"]["phantom"]["max_shapes"], 2);
}

#[test]
fn phantom_output_is_seed_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        assert_ok(&memaud(d, &tiny(&["--seed", "21", "phantom"])));
    }
    let va = std::fs::read(a.path().join("volumes/phantom_0000.vol")).unwrap();
    let vb = std::fs::read(b.path().join("volumes/phantom_0000.vol")).unwrap();
    assert_eq!(va, vb);
}
