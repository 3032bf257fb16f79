//! The `margin-distill` binary end to end: exit codes, outputs and
//! reproducibility.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMOKE: &str = include_str!("../configs/synth_smoke.toml");

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_margin-distill"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// Writes `text` as `cfg.toml` in `dir` with outputs going to `dir/runs`.
fn config(dir: &Path, text: &str) -> PathBuf {
    let text = text.replace("out_dir = \"../runs\"", "out_dir = \"runs\"");
    let path = dir.join("cfg.toml");
    fs::write(&path, text).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn negative_alpha_is_a_config_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &SMOKE.replace("alpha = 1e-5", "alpha = -1.0"));
    let out = bin(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("distill.alpha"), "{}", stderr(&out));
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn bad_invocations_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    assert_eq!(bin(&["run", "--config", missing.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(bin(&["run"]).status.code(), Some(2));

    let cfg = config(dir.path(), &SMOKE.replace("[ablation]", "[ablation]\nbogus = 1"));
    let out = bin(&["ablate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("bogus"), "{}", stderr(&out));

    assert_eq!(bin(&["--help"]).status.code(), Some(0));
}

#[test]
fn injected_backward_fault_fails_the_gradient_check() {
    let clean = bin(&["verify-gradients"]);
    assert_eq!(clean.status.code(), Some(0), "{}", String::from_utf8_lossy(&clean.stdout));

    let out = bin(&["verify-gradients", "--inject-fault", "relu"]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    let failed = text.lines().find(|l| l.starts_with("failed:")).expect("failure line");
    assert!(failed.contains("relu"), "{failed}");
}

#[test]
fn run_writes_artifacts_and_repeats_bitwise() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut csvs = Vec::new();
    for d in &dirs {
        let cfg = config(d.path(), SMOKE);
        let out = bin(&["run", "--config", cfg.to_str().unwrap(), "--seed", "11"]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        let run = d.path().join("runs/synth-smoke");
        for f in [
            "manifest.json",
            "teacher.csv",
            "teacher.jsonl",
            "teacher.dfrg",
            "margins.txt",
            "student.csv",
            "student.jsonl",
            "student.dfrg",
            "summary.json",
        ] {
            assert!(run.join(f).is_file(), "missing {f}");
        }
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["teacher_seed"], 11);
        assert_eq!(manifest["student_seeds"], serde_json::json!([11]));
        csvs.push((
            fs::read(run.join("teacher.csv")).unwrap(),
            fs::read(run.join("student.csv")).unwrap(),
        ));

        let out = bin(&["eval", "--config", cfg.to_str().unwrap(), "--seed", "11"]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        let eval: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
        assert_eq!(eval["student_test_error_pct"], summary["student_test_error_pct"]);
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn eval_without_a_teacher_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMOKE);
    let out = bin(&["eval", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("teacher.checkpoint"), "{}", stderr(&out));
}
