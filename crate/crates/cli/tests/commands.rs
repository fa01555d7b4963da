use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use trustlab_cli::commands::{cmd_sweep, resolve, ConfigSource};
use trustlab_cli::config::ExperimentConfig;
use trustlab_cli::runner::{run_to_dir, sweep_configs, COMPARISON_FILE, CONFIG_ECHO_FILE, METRICS_FILE, SUMMARY_FILE};
use trustlab_cli::Failure;

fn trustlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trustlab")).args(args).output().expect("spawn trustlab")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn short_run(out: &Path, extra: &[&str]) -> Output {
    let out = out.to_str().unwrap();
    let mut args = vec!["run", "--preset", "stability-dppo-tv", "--out", out, "--set", "train.total_iterations=12"];
    args.extend_from_slice(extra);
    trustlab(&args)
}

#[test]
fn run_writes_metrics_echo_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = short_run(dir.path(), &["--set", "train.snapshot_every=5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(metrics.lines().count(), 13);
    let summary = fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
    for field in ["final_reward=", "peak_reward=", "iterations_to_threshold="] {
        assert!(summary.contains(field), "{summary}");
    }
    assert!(dir.path().join("policy_000005.txt").exists());
    assert!(dir.path().join("policy_000012.txt").exists());
}

#[test]
fn echoed_config_reproduces_the_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(code(&short_run(a.path(), &["--seed", "5"])), 0);
    let echo = a.path().join(CONFIG_ECHO_FILE);
    let o = trustlab(&["run", "--config", echo.to_str().unwrap(), "--out", b.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in [METRICS_FILE, SUMMARY_FILE] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_override_changes_outputs_and_is_echoed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(code(&short_run(a.path(), &[])), 0);
    assert_eq!(code(&short_run(b.path(), &["--seed", "9"])), 0);
    assert_ne!(fs::read(a.path().join(METRICS_FILE)).unwrap(), fs::read(b.path().join(METRICS_FILE)).unwrap());
    let echo = ExperimentConfig::from_toml(&fs::read_to_string(b.path().join(CONFIG_ECHO_FILE)).unwrap()).unwrap();
    assert_eq!(echo.seed, 9);
    assert_eq!(echo.train.total_iterations, 12);
    assert_eq!(echo.out_dir, b.path());
}

#[test]
fn malformed_config_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "seed = 1\n[train]\nlearning_rate = 0.1\n").unwrap();
    let o = trustlab(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    fs::write(&path, "[env\nvocab = 3\n").unwrap();
    assert_eq!(code(&trustlab(&["run", "--config", path.to_str().unwrap()])), 2);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&trustlab(&["run", "--preset", "no-such-preset"])), 2);
    assert_eq!(code(&trustlab(&["run", "--set", "train.group_size=1"])), 2);
    assert_eq!(code(&trustlab(&["frobnicate"])), 2);
    assert_eq!(code(&trustlab(&["verify-bounds", "--vocab", "50", "--horizon", "9"])), 2);
}

#[test]
fn infinite_cap_override_is_accepted() {
    let cfg = resolve(&ConfigSource { preset: Some("stability-grpo".into()), set: vec!["algo.c_cap=inf".into()], ..Default::default() }).unwrap();
    assert!(cfg.algo.c_cap.is_infinite());
}

#[test]
fn config_and_preset_together_is_a_usage_error() {
    let src = ConfigSource { config: Some("x.toml".into()), preset: Some("stability-pgis".into()), ..Default::default() };
    assert!(matches!(resolve(&src), Err(Failure::Usage(_))));
}

#[test]
fn zero_iterations_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.train.total_iterations = 0;
    cfg.out_dir = dir.path().to_path_buf();
    let out = run_to_dir(&cfg).unwrap();
    assert!(out.metrics.is_empty());
    assert_eq!(fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap().lines().count(), 1);
    assert!(out.summary.iterations_to_threshold.is_none());
}

#[test]
fn verify_bounds_small_sweeps_pass() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bounds.csv");
    let o = trustlab(&["verify-bounds", "--pairs", "0", "--out", csv.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 1);

    let o = trustlab(&["verify-bounds", "--pairs", "1000", "--vocab", "3", "--horizon", "3", "--seed", "4", "--out", csv.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 1001);
    assert!(String::from_utf8_lossy(&o.stdout).contains("failures=0"));
}

#[test]
fn verify_bounds_injected_bug_exits_1_with_witness() {
    let o = trustlab(&["verify-bounds", "--pairs", "20", "--inject-bug"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("witness") && err.contains("identity"), "{err}");
}

#[test]
fn divergence_props_small_sweep_passes() {
    let o = trustlab(&["divergence-props", "--pairs", "500", "--vocab", "4,64", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn sweep_with_no_values_is_an_error() {
    assert!(sweep_configs(&ExperimentConfig::default(), "algo.alpha", &[]).is_err());
    let src = ConfigSource { preset: Some("efficiency-relax-both".into()), ..Default::default() };
    assert!(matches!(cmd_sweep(&src, Some("algo.alpha"), &[]), Err(Failure::Usage(_))));
}

#[test]
fn alpha_sweep_writes_runs_and_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let o = trustlab(&[
        "sweep",
        "--preset",
        "sweep-alpha",
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "train.total_iterations=6",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(dir.path().join(COMPARISON_FILE)).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4, "{table}");
    assert!(lines[0].contains("iterations_to_threshold"));
    for v in ["0", "0.05", "0.1"] {
        assert!(dir.path().join(format!("algo.alpha={v}")).join(METRICS_FILE).exists(), "{v}");
    }
}

#[test]
fn render_produces_svg() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&short_run(dir.path(), &[])), 0);
    let svg = dir.path().join("reward.svg");
    let metrics = dir.path().join(METRICS_FILE);
    let o = trustlab(&["render", "--input", metrics.to_str().unwrap(), "--column", "reward_mean", "--out", svg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg") && text.contains("<polyline"), "{text}");

    let o = trustlab(&["render", "--input", metrics.to_str().unwrap(), "--column", "nope", "--out", svg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}
