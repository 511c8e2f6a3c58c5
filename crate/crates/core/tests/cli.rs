//! End-to-end checks of the `fedbayes` binary: exit codes, validation
//! messages, artifact layout, and byte-level reproducibility.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fedbayes(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedbayes"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY: &str = "[tiny]\n\
    strategy = fedbayes\n\
    rounds = 2\n\
    local_epochs = 1\n\
    client_count = 2\n\
    master_seed = 11\n\
    pretrain_epochs = 2\n\
    synth.per_class = 20\n\
    synth.test_per_class = 5\n\
    attack.1.kind = label_flip\n\
    attack.1.fraction = 0.5\n\
    attack.1.target_label = 3\n\
    attack.1.weight_multiplier = 2.0\n";

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("experiments.ini");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn version_prints_package_version() {
    let out = fedbayes(&["version"]);
    assert!(out.status.success());
    assert_eq!(stdout(&out).trim(), concat!("fedbayes ", env!("CARGO_PKG_VERSION")));
}

#[test]
fn validate_accepts_a_good_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out = fedbayes(&["validate", &config]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("tiny: strategy fedbayes, 2 clients, 2 rounds"), "got: {text}");
    assert!(text.contains("OK"));
}

#[test]
fn validate_rejects_an_unknown_key() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[x]\nstrategy = fedavg\nlurning_rate = 0.1\n");
    let out = fedbayes(&["validate", &config]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("error:") && err.contains("lurning_rate"), "got: {err}");
}

#[test]
fn missing_config_file_fails() {
    let out = fedbayes(&["run", "/nonexistent/experiments.ini"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("error:"));
}

#[test]
fn empty_config_warns_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "# nothing defined yet\n");
    let out = fedbayes(&["run", &config]);
    assert!(out.status.success());
    assert!(stderr(&out).contains("warning: no experiments defined"));
}

#[test]
fn run_writes_byte_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");

    for out_dir in [&out_a, &out_b] {
        let out = fedbayes(&["run", &config, "--output-dir", &out_dir.to_string_lossy()]);
        assert!(out.status.success(), "stderr: {}", stderr(&out));
        assert!(stdout(&out).contains("tiny [fedbayes]: 2 rounds"));
    }

    let csv_a = fs::read(out_a.join("tiny.csv")).unwrap();
    let csv_b = fs::read(out_b.join("tiny.csv")).unwrap();
    assert_eq!(csv_a, csv_b, "identical runs must produce identical CSV bytes");

    let text = String::from_utf8(csv_a).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "round,strategy,clean_accuracy,clean_loss,triggered_accuracy,attack_success_rate,client_0_acc,client_1_acc"
    );
    assert_eq!(lines.count(), 3, "round 0 plus two federated rounds");

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_a.join("tiny.json")).unwrap()).unwrap();
    assert_eq!(summary["experiment"], "tiny");
    assert_eq!(summary["rounds_completed"], 2);
    assert_eq!(summary["config"]["master_seed"], 11);
    assert_eq!(summary["config"]["attacks"]["1"]["kind"], "label_flip");
    assert!(out_a.join("run.log").exists());
}

#[test]
fn seed_override_rewrites_the_echoed_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out_base = dir.path().join("base");
    let out_seeded = dir.path().join("seeded");

    let out = fedbayes(&["run", &config, "--output-dir", &out_base.to_string_lossy()]);
    assert!(out.status.success());
    let out = fedbayes(&[
        "run",
        &config,
        "--output-dir",
        &out_seeded.to_string_lossy(),
        "--seed",
        "999",
    ]);
    assert!(out.status.success());

    let base = fs::read(out_base.join("tiny.csv")).unwrap();
    let seeded = fs::read(out_seeded.join("tiny.csv")).unwrap();
    assert_ne!(base, seeded, "a different master seed must change the metrics");

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_seeded.join("tiny.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["master_seed"], 999);
}
