use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use c2p_core::datasets::DatasetManifest;

const TINY: &str = "epochs = 2\ncrop = 32\ncalibration_size = 4\n\n[network]\nchannels = 8\n";

fn c2p(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_c2p")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, n: &str, negatives: bool) {
    let mut args = vec!["synth", "--n", n, "--size", "40", "--seed", "7", "--out", p(dir)];
    if negatives {
        args.extend(["--negatives", "7"]);
    }
    let out = c2p(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_writes_manifest_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "4", false);
    let manifest = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(manifest.entries.len(), 4);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("run-synth.json")).unwrap()).unwrap();
    assert_eq!(meta["resolved"]["n"], 4);
    assert_eq!(meta["inputs"].as_array().unwrap().len(), 1 + 4 * 3);

    let again = tempfile::tempdir().unwrap();
    synth(again.path(), "4", false);
    let meta2: serde_json::Value = serde_json::from_str(&fs::read_to_string(again.path().join("run-synth.json")).unwrap()).unwrap();
    assert_eq!(meta["input_hash"], meta2["input_hash"]);
}

#[test]
fn usage_errors_exit_two_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("never");
    let out = c2p(&["synth", "--n", "2", "--bogus", "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());
    assert_eq!(c2p(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = c2p(&["train", "--manifest", p(&dir.path().join("missing.json")), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1);
    assert!(stderr.starts_with("error: "));

    let out = c2p(&["synth", "--n", "0", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_eval_plot_resume() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "4", true);
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    let manifest = data.join("manifest.json");
    let out = c2p(&["train", "--manifest", p(&manifest), "--config", p(&cfg), "--seed", "3", "--out", p(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(run.join("logs.jsonl")).unwrap().lines().count(), 2);
    let ckpt = run.join("ckpt/final.json");
    assert!(ckpt.is_file());
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run-train.json")).unwrap()).unwrap();
    assert_eq!(meta["resolved"]["seed"], 3);
    assert_eq!(meta["resolved"]["network"]["channels"], 8);

    let out = c2p(&["eval", "--checkpoint", p(&ckpt), "--manifest", p(&manifest), "--out", p(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["images"].as_array().unwrap().len(), 4);

    let out = c2p(&["plot", "--logs", p(&run.join("logs.jsonl")), "--out", p(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["avg_psnr.svg", "losses.svg", "difficulty.svg"] {
        let svg = fs::read_to_string(run.join("plots").join(name)).unwrap();
        assert!(svg.contains("<svg"));
    }

    let longer = dir.path().join("longer.toml");
    fs::write(&longer, TINY.replace("epochs = 2", "epochs = 4")).unwrap();
    let first = dir.path().join("first");
    let out = c2p(&["train", "--manifest", p(&manifest), "--config", p(&longer), "--epochs", "2", "--out", p(&first)]);
    assert!(out.status.success());
    let out = c2p(&["train", "--manifest", p(&manifest), "--resume", p(&first.join("ckpt/final.json")), "--out", p(&first)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(first.join("logs.jsonl")).unwrap().lines().count(), 2);
}

#[test]
fn negatives_subcommand_and_ablation_ladder() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "2", false);
    let manifest = data.join("manifest.json");
    let out = c2p(&["negatives", "--manifest", p(&manifest), "--z", "7", "--out", p(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    DatasetManifest::load(&manifest).unwrap().require_negatives(7).unwrap();

    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let ab = dir.path().join("ablate");
    let out = c2p(&["ablate", "--manifest", p(&manifest), "--config", p(&cfg), "--epochs", "1", "--out", p(&ab)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(ab.join("ablation.json")).unwrap()).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["base", "+pdu", "+cr_consensual_no_cl", "+c2r"]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("| +") || l.starts_with("| base")).count(), 4);
}
