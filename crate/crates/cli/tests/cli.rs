use std::fs;
use std::process::{Command, Output};

fn accept(root: &std::path::Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_accept")).args(args).env("ACCEPT_RUNS_DIR", root).output().unwrap()
}

#[test]
fn budget_prints_rank_params_and_capacity() {
    let dir = tempfile::tempdir().unwrap();
    let out = accept(dir.path(), &["budget", "--d", "768", "--positions", "256", "--K", "2", "--budget", "30720"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "r=24\nparams=30720\ncapacity=576\n");
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(accept(dir.path(), &["budget", "--d", "768"]).status.code(), Some(2));
    assert_eq!(accept(dir.path(), &["no-such-verb"]).status.code(), Some(2));
    // K must divide d
    let out = accept(dir.path(), &["budget", "--d", "10", "--positions", "4", "--K", "3", "--budget", "100"]);
    assert_eq!(out.status.code(), Some(2));

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"backbone": {}, "task": {}, "surprise": 1}"#).unwrap();
    let out = accept(dir.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("surprise"));
}

#[test]
fn over_budget_configs_need_the_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("over.json");
    let desk = include_str!("../../../configs/desk_pair_match.json");
    let mut v: serde_json::Value = serde_json::from_str(desk).unwrap();
    v["budget"] = serde_json::json!(100);
    fs::write(&cfg, v.to_string()).unwrap();
    let path = cfg.to_str().unwrap();
    assert_eq!(accept(dir.path(), &["budget", "--config", path]).status.code(), Some(2));
    let out = accept(dir.path(), &["budget", "--config", path, "--allow-over-budget"]);
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().ends_with("total=240\n"));
}

#[test]
fn missing_run_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = accept(dir.path(), &["eval", "--run", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oversized_fewshot_sample_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let desk = include_str!("../../../configs/desk_pair_match.json");
    let mut v: serde_json::Value = serde_json::from_str(desk).unwrap();
    // a barely trained backbone is enough to reach the sampling step
    v["backbone"]["pretrain"]["steps"] = serde_json::json!(2);
    v["backbone"]["pretrain"]["train_per_task"] = serde_json::json!(20);
    let cfg = dir.path().join("fewshot.json");
    fs::write(&cfg, v.to_string()).unwrap();
    let out = accept(dir.path(), &["fewshot", "--config", cfg.to_str().unwrap(), "--gamma", "5000", "--seeds", "1"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn granularity_sweep_skips_non_divisors() {
    let dir = tempfile::tempdir().unwrap();
    let out = accept(
        dir.path(),
        &[
            "sweep-granularity",
            "--component",
            "scap",
            "--budget",
            "76800",
            "--d",
            "768",
            "--positions",
            "256",
            "--complement",
            "46080",
            "--t",
            "100",
            "384",
        ],
    );
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "t,K,r,component_params,params,metric\n384,2,24,30720,76800,\n");
    assert!(String::from_utf8_lossy(&out.stderr).contains("t=100"));
}

#[test]
fn report_on_an_empty_root_has_only_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = accept(dir.path(), &["report"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("run,name,metric"));
}
