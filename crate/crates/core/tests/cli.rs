use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cacovid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cacovid"))
        .args(args)
        .output()
        .unwrap()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}", String::from_utf8_lossy(&out.stdout));
    })
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

const SMALL: &str = "seeds = [3]\n[train]\nsamples = 12\n[eval]\nepisodes = 4\n";

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "[train]\nlearning_rate = 1.0\n");
    let out = cacovid(&["complexity", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let out = cacovid(&["complexity", "--config", "/nonexistent/cfg.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failed_assertion_exits_with_assertion_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "strict.toml",
        "[assert]\nmin_reduction = 1000.0\n",
    );
    let out = cacovid(&["complexity", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("assertion failed"));
    assert_eq!(json(&out)["passed"], false);
}

#[test]
fn complexity_reports_space_and_flops() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("c");
    let out = cacovid(&[
        "complexity",
        "--n",
        "8",
        "--k",
        "2",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let report = json(&out);
    assert_eq!(report["space"]["m"], 4);
    assert_eq!(report["space"]["subspaces"], 2);
    assert_eq!(report["space"]["log2_arbitrary"], 8.0);
    let written: Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("complexity.json")).unwrap())
            .unwrap();
    assert_eq!(written, report);
}

#[test]
fn sampler_stats_is_seeded() {
    let run = || {
        json(&cacovid(&[
            "sampler-stats",
            "--draws",
            "2000",
            "--seed",
            "5",
        ]))
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a["total_variation"].as_f64().unwrap() < 0.1, "{a}");
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let out_dir = dir.path().join("train");
    let out = cacovid(&[
        "train",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let ckpt = out_dir.join("policy.ckpt");
    assert!(ckpt.exists());
    let metrics = std::fs::read_to_string(out_dir.join("metrics.jsonl")).unwrap();
    for line in metrics.lines() {
        let _: Value = serde_json::from_str(line).unwrap();
    }

    let out = cacovid(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = json(&out);
    let recall = report["recall"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&recall), "{report}");

    let out = cacovid(&[
        "sample-demo",
        "--config",
        &cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(out.status.success());
}

#[test]
fn run_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let report = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = cacovid(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
        assert!(out.status.code().is_some_and(|c| c == 0 || c == 3));
        assert!(out_dir.join("timing.json").exists());
        std::fs::read(out_dir.join("report.json")).unwrap()
    };
    assert_eq!(report("a"), report("b"));
}

#[test]
fn strategy_flag_is_validated() {
    let out = cacovid(&["eval", "--strategy", "frame-best", "--checkpoint", "x"]);
    assert_eq!(out.status.code(), Some(2));
}
