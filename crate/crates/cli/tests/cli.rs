use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn era_kit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_era-kit"))
        .args(args)
        .env("ERA_KIT_THREADS", "1")
        .output()
        .expect("spawn era-kit")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn verify_continuous_reports_each_property() {
    let dir = tempfile::tempdir().unwrap();
    let o = era_kit(&["verify", "--suite", "continuous", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("prop_b1_bound: pass"), "{out}");
    let report = fs::read_to_string(dir.path().join("verify-continuous.jsonl")).unwrap();
    assert!(report.lines().next().unwrap().starts_with("{\"header\""));
}

#[test]
fn unknown_suite_is_a_usage_error() {
    let o = era_kit(&["verify", "--suite", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"));
}

#[test]
fn config_missing_seeds_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "steps = 10\n").unwrap();
    let o = era_kit(&["train", "grpo-era-toy", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("seeds"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "seeds = [0]\nstepz = 10\n").unwrap();
    let o = era_kit(&["train", "sac", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stepz"), "{}", stderr(&o));
}

#[test]
fn inapplicable_flag_is_rejected() {
    let o = era_kit(&["train", "grpo-toy", "--tau", "0.01", "--seeds", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn compare_needs_two_records() {
    let o = era_kit(&["compare", "only-one.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
}

fn train_small(dir: &Path) {
    let o = era_kit(&[
        "train",
        "grpo-era-toy",
        "--steps",
        "4",
        "--seeds",
        "0,1",
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn small_grpo_run_writes_records_and_compares_to_zero() {
    let dir = tempfile::tempdir().unwrap();
    train_small(dir.path());
    for name in ["grpo-era-toy-seed0.jsonl", "grpo-era-toy-seed1.ckpt", "grpo-era-toy-summary.csv"] {
        assert!(dir.path().join(name).exists(), "missing {name}");
    }
    let trace = fs::read_to_string(dir.path().join("grpo-era-toy-seed0.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 5);

    let rec = dir.path().join("grpo-era-toy-seed0.jsonl");
    let rec = rec.to_str().unwrap();
    let o = era_kit(&["compare", rec, rec]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = stdout(&o);
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let mut rows = 0;
    for line in lines {
        rows += 1;
        for (h, v) in header.iter().zip(line.split(',')) {
            if h.ends_with("_delta1") {
                assert_eq!(v.parse::<f64>().unwrap(), 0.0, "{h} in {line}");
            }
        }
    }
    assert_eq!(rows, 4);
}
