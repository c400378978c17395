//! Drives the `excae` binary through the staged workflow.

use std::path::Path;
use std::process::{Command, Output};

fn excae(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_excae"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn synth(dir: &Path) {
    ok(&excae(dir, &["synth", "--out", "s", "--seed", "2", "--num-videos", "30"]));
}

#[test]
fn staged_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d);
    let corpus_before = std::fs::read(d.join("s/corpus.jsonl")).unwrap();

    let out = ok(&excae(d, &["csi-optimize", "--config", "s/config.json", "--out", "state"]));
    assert!(out.contains("iteration(s)"));
    assert!(d.join("state/history.jsonl").is_file());

    ok(&excae(
        d,
        &["caption", "--config", "s/config.json", "--prompt", "state/best_prompt.txt", "--cache", "c.jsonl"],
    ));
    let lines = std::fs::read_to_string(d.join("c.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 30);

    ok(&excae(
        d,
        &[
            "train", "--config", "s/config.json", "--cache", "c.jsonl", "--regime", "both", "--csi", "on", "--prompt",
            "state/best_prompt.txt", "--out", "model",
        ],
    ));
    for f in ["checkpoint.bin", "loss.csv", "config.json", "prompt.txt"] {
        assert!(d.join("model").join(f).is_file(), "missing {f}");
    }

    let out = ok(&excae(
        d,
        &["eval", "--checkpoint", "model/checkpoint.bin", "--cache", "c.jsonl", "--out", "report.json"],
    ));
    assert!(out.contains("Text-to-Video"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["num_queries"], 15);

    let out = ok(&excae(d, &["gap", "--checkpoint", "model/checkpoint.bin", "--cache", "c.jsonl"]));
    let gap: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(gap["gap_after"].as_f64().unwrap() < gap["gap_before"].as_f64().unwrap());

    assert_eq!(std::fs::read(d.join("s/corpus.jsonl")).unwrap(), corpus_before);
}

#[test]
fn video_regime_trains_without_a_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d);
    ok(&excae(
        d,
        &["train", "--config", "s/config.json", "--regime", "video", "--ecs", "off", "--out", "m"],
    ));
    ok(&excae(d, &["eval", "--checkpoint", "m/checkpoint.bin"]));
}

#[test]
fn missing_prerequisites_exit_with_code_4() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = excae(d, &["eval", "--checkpoint", "nowhere/checkpoint.bin"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run `train` first"));

    synth(d);
    let out = excae(d, &["train", "--config", "s/config.json", "--regime", "both", "--out", "m"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run `caption` first"));

    let out = excae(d, &["train", "--config", "s/config.json", "--csi", "on", "--cache", "c.jsonl", "--out", "m"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run `csi-optimize` first"));
}

#[test]
fn invalid_config_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("bad.json"), "{\"corpus\": 1, \"extra\": true}").unwrap();
    let out = excae(d, &["run", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
    let out = excae(d, &["sweep", "--param", "temperature", "--values", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn expert_sweep_prints_four_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d);
    let out = ok(&excae(
        d,
        &["sweep", "--config", "s/config.json", "--param", "active_experts", "--values", "0,1,2,4", "--out", "rows.json"],
    ));
    for label in ["experts=0", "experts=1", "experts=2", "experts=4"] {
        assert!(out.contains(label), "{out}");
    }
    let rows: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("rows.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 4);
}

#[test]
fn run_writes_one_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d);
    let raw = std::fs::read_to_string(d.join("s/config.json")).unwrap();
    let mut cfg: serde_json::Value = serde_json::from_str(&raw).unwrap();
    cfg["runs_dir"] = serde_json::json!("runs");
    std::fs::write(d.join("run.json"), cfg.to_string()).unwrap();
    let out = ok(&excae(d, &["run", "--config", "run.json"]));
    assert!(out.contains("artifacts in"));
    let dirs: Vec<_> = std::fs::read_dir(d.join("runs")).unwrap().collect();
    assert_eq!(dirs.len(), 1);
    let run = dirs[0].as_ref().unwrap().path();
    for f in ["config.json", "history.jsonl", "best_prompt.txt", "checkpoint.bin", "report.json", "loss.csv"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
}
