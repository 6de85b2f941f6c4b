//! End-to-end runs of the `selfaug` binary.

use std::path::Path;
use std::process::Command;

const TINY: &str = "[dataset]\nperClass = 16\n[moco]\nepochs = 1\nqueueSize = 32\nbatchSize = 16\n";

fn selfaug(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_selfaug"))
        .current_dir(dir)
        .env_remove("SELFAUG_SEED")
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(selfaug(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(selfaug(dir.path(), &["--version"]).status.code(), Some(0));
    assert_eq!(selfaug(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(selfaug(dir.path(), &["search", "--no-such-flag"]).status.code(), Some(1));
    let out = selfaug(dir.path(), &["probe", "--checkpoint", "missing.saug"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.saug"));
    let out = selfaug(dir.path(), &["--profile", "nope", "find-base"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pretrain_then_probe_writes_manifested_runs() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let out = selfaug(dir.path(), &["--config", "tiny.toml", "--seed", "4", "--workers", "2", "pretrain"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("runs/pretrain-s4");
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("manifest.json")).unwrap()).unwrap();
    let files: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f["path"].as_str().unwrap()).collect();
    assert_eq!(files, ["checkpoint.saug", "config.toml", "pipeline.json", "train_log.jsonl"]);
    assert!(std::fs::read_to_string(run.join("config.toml")).unwrap().contains("seed = 4"));

    let out = Command::new(env!("CARGO_BIN_EXE_selfaug"))
        .current_dir(dir.path())
        .env("SELFAUG_SEED", "6")
        .args(["--config", "tiny.toml", "probe", "--checkpoint", "runs/pretrain-s4/checkpoint.saug", "--task", "supervised"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("runs/probe-s6/report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 6);
    for key in ["rotationTop1", "supervisedTop1", "infoNce", "contrastiveTop1"] {
        let v = report[key].as_f64().unwrap();
        assert!(v.is_finite(), "{key}");
    }
}

#[test]
fn same_seed_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let mut hashes = Vec::new();
    for _ in 0..2 {
        let o = selfaug(dir.path(), &["--config", "tiny.toml", "randaugment", "--grid", "1:4,2:9"]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        hashes.push(std::fs::read(dir.path().join("runs/randaugment-s0/manifest.json")).unwrap());
    }
    assert_eq!(hashes[0], hashes[1]);
}
