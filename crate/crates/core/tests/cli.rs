//! End-to-end runs of the `rhi` binary on a tiny 16×16 setup.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "resolution=16",
    "--set",
    "hidden_units=16",
    "--set",
    "base_channels=8",
    "--set",
    "train_batch=8",
];

fn rhi(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rhi"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Generates a 4×4 dataset and trains a 3-epoch decoder in `dir`.
fn tiny_model(dir: &Path) -> PathBuf {
    let o = rhi(dir, &[&["dataset", "gen", "--out", "data/arm.rhid", "--grid", "4"], SMALL].concat());
    assert_eq!(code(&o), 0, "{o:?}");
    let o = rhi(
        dir,
        &[
            &["train", "--model", "decoder", "--dataset", "data/arm.rhid", "--out", "models/dec.rhim"],
            &["--epochs", "3"][..],
            SMALL,
        ]
        .concat(),
    );
    assert_eq!(code(&o), 0, "{o:?}");
    dir.join("models/dec.rhim")
}

fn short_run<'a>() -> Vec<&'a str> {
    [SMALL, &["--set", "duration_s=2", "--set", "iterations=100"][..]].concat()
}

#[test]
fn run_writes_the_documented_layout_and_report_reproduces_it() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny_model(dir);
    let args = [
        &["run", "--model", "models/dec.rhim", "--run-id", "r1", "--trials", "1"][..],
        &short_run(),
    ]
    .concat();
    let o = rhi(dir, &args);
    assert_eq!(code(&o), 0, "{o:?}");
    let run = dir.join("out/r1");
    for p in ["traces", "plots", "summary.csv", "resolved-config.txt"] {
        assert!(run.join(p).exists(), "{p} missing");
    }
    let traces: Vec<_> = std::fs::read_dir(run.join("traces"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with("_trial0.csv"))
        .collect();
    assert_eq!(traces.len(), 6, "{traces:?}");
    let summary = std::fs::read_to_string(run.join("summary.csv")).unwrap();
    assert!(summary.starts_with("condition,mode,trial,drift_cm,mean_abs_force_proxy,gamma_tail_mean,aborted_flag\n"));
    let resolved = std::fs::read_to_string(run.join("resolved-config.txt")).unwrap();
    assert!(resolved.contains("iterations = 100") || resolved.contains("iterations=100"), "{resolved}");

    let o = rhi(dir, &["report", "out/r1"]);
    assert_eq!(code(&o), 0, "{o:?}");
    assert_eq!(stdout(&o), summary);
}

#[test]
fn flags_override_config_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny_model(dir);
    std::fs::write(dir.join("agent.cfg"), "iterations = 50\nduration_s = 1\n").unwrap();
    std::fs::write(
        dir.join("exp.cfg"),
        "agent_config = agent.cfg\nrun_id = from_file\ntrials_per_cell = 1\nresolution = 16\nconditions = left\nmodes = sync\n",
    )
    .unwrap();
    let o = rhi(dir, &["--config", "exp.cfg", "run", "--model", "models/dec.rhim", "--run-id", "from_flag"]);
    assert_eq!(code(&o), 0, "{o:?}");
    assert!(!dir.join("out/from_file").exists());
    let trace = std::fs::read_to_string(dir.join("out/from_flag/traces/left_sync_trial0.csv")).unwrap();
    assert_eq!(trace.lines().count(), 51);
}

#[test]
fn config_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&rhi(dir, &["render-check", "--set", "no_such_key=1"])), 1);
    assert_eq!(code(&rhi(dir, &["render-check", "--set", "resolution=banana"])), 1);
    assert_eq!(code(&rhi(dir, &["gamma-sim", "--set", "sigma_c=-1"])), 1);
    assert_eq!(code(&rhi(dir, &["render-check", "--set", "missing-equals"])), 1);
}

#[test]
fn io_errors_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let o = rhi(dir, &["run", "--model", "nowhere.rhim"]);
    assert_eq!(code(&o), 3, "{o:?}");
    assert_eq!(code(&rhi(dir, &["--config", "absent.cfg", "render-check"])), 3);
    assert_eq!(code(&rhi(dir, &["report", "no-run"])), 3);
    std::fs::write(dir.join("junk.rhim"), b"not a model").unwrap();
    assert_eq!(code(&rhi(dir, &["run", "--model", "junk.rhim"])), 3);
}

#[test]
fn divergent_training_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let args = [
        &["train", "--model", "decoder", "--out", "m.rhim", "--epochs", "2", "--lr", "1e300"][..],
        &["--set", "grid_shoulder=3", "--set", "grid_elbow=3"],
        SMALL,
    ]
    .concat();
    let o = rhi(dir, &args);
    assert_eq!(code(&o), 2, "{o:?}");
    assert!(!dir.join("m.rhim").exists());
}

#[test]
fn render_check_and_gamma_sim_succeed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let o = rhi(dir, &["render-check", "--out", "rc"]);
    assert_eq!(code(&o), 0, "{o:?}");
    for c in ["left", "center", "right"] {
        assert!(dir.join(format!("rc/rest_{c}.pgm")).exists());
    }
    // identical renders on a second call
    let again = rhi(dir, &["render-check", "--out", "rc2"]);
    assert_eq!(stdout(&o), stdout(&again));

    let o = rhi(dir, &["gamma-sim", "--pairs", "20"]);
    assert_eq!(code(&o), 0, "{o:?}");
    let out = stdout(&o);
    assert!(out.starts_with("pair,sync_tail_mean,async_tail_mean\n"));
    assert_eq!(out.lines().count(), 21);
}

#[test]
fn dataset_generation_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let a = rhi(dir, &[&["dataset", "gen", "--out", "a.rhid", "--grid", "5"], SMALL].concat());
    let b = rhi(dir, &[&["dataset", "gen", "--out", "b.rhid", "--grid", "5"], SMALL].concat());
    assert_eq!(code(&a), 0);
    assert_eq!(code(&b), 0);
    assert_eq!(std::fs::read(dir.join("a.rhid")).unwrap(), std::fs::read(dir.join("b.rhid")).unwrap());
    assert!(stdout(&a).contains("25 samples, 25 distinct images"), "{}", stdout(&a));
}
