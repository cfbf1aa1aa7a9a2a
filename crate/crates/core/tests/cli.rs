use std::path::Path;
use std::process::Command;

use qsynth::cli::RunManifest;

fn qsynth(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_qsynth"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn ok(dir: &Path, args: &[&str]) {
    let (code, err) = qsynth(dir, args);
    assert_eq!(code, 0, "{args:?} failed: {err}");
}

fn manifest(dir: &Path, output: &str) -> RunManifest {
    let text = std::fs::read_to_string(dir.join(format!("{output}.manifest.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// Problems, a base checkpoint and its dataset, all tiny.
fn front(dir: &Path) {
    ok(dir, &["gen-problems", "--seed", "3", "--count", "6", "--out", "p.json"]);
    ok(dir, &["pretrain-ckpt", "--problems", "p.json", "--out", "ckpt.bin", "--steps", "20"]);
    ok(dir, &["build-dataset", "--problems", "p.json", "--ckpt", "ckpt.bin", "--m-gen", "2", "--out", "ds.jsonl"]);
}

#[test]
fn happy_path_writes_one_manifest_per_command() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    front(d);
    ok(d, &["train-phi", "--ckpt", "ckpt.bin", "--dataset", "ds.jsonl", "--problems", "p.json", "--out", "phi.bin", "--steps", "10"]);
    ok(d, &[
        "train-theta", "--ckpt", "ckpt.bin", "--phi", "phi.bin", "--dataset", "ds.jsonl", "--problems", "p.json",
        "--out", "theta.bin", "--steps", "10",
    ]);
    ok(d, &["sample", "--model", "theta.bin", "--problems", "p.json", "--m", "3", "--out", "c.jsonl"]);
    ok(d, &["score", "--model", "theta.bin", "--candidates", "c.jsonl", "--problems", "p.json", "--out", "s.jsonl"]);
    for regime in ["plain", "ranked", "filtered", "oracle"] {
        let out = format!("eval-{regime}.json");
        ok(d, &["eval", "--problems", "p.json", "--scored", "s.jsonl", "--m", "3", "--regime", regime, "--out", &out]);
    }
    ok(d, &["sweep-m", "--problems", "p.json", "--scored", "s.jsonl", "--m-list", "1,3", "--out", "sweep.json"]);
    ok(d, &["report", "--metrics", "phi.bin.metrics.jsonl", "theta.bin.metrics.jsonl", "--out", "curves.csv"]);

    let m = manifest(d, "theta.bin");
    assert_eq!(m.command, "train-theta");
    assert_eq!(m.inputs.len(), 4);
    assert_eq!(m.outputs.len(), 2);
    assert!(d.join("sweep.csv").exists());
    let csv = std::fs::read_to_string(d.join("curves.csv")).unwrap();
    assert!(csv.lines().count() > 2);
    let manifests = std::fs::read_dir(d)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".manifest.json"))
        .count();
    assert_eq!(manifests, 13);
}

#[test]
fn dataset_from_another_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    front(d);
    ok(d, &["pretrain-ckpt", "--problems", "p.json", "--out", "other.bin", "--steps", "21"]);
    let (code, err) = qsynth(d, &["train-phi", "--ckpt", "other.bin", "--dataset", "ds.jsonl", "--problems", "p.json", "--out", "phi.bin"]);
    assert_eq!(code, 1);
    let line: serde_json::Value = serde_json::from_str(err.lines().last().unwrap()).unwrap();
    assert_eq!(line["error"], "validation");
    assert!(!d.join("phi.bin").exists());
}

#[test]
fn stage_tags_are_checked() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    front(d);
    let (code, _) = qsynth(d, &["score", "--model", "ckpt.bin", "--candidates", "ds.jsonl", "--problems", "p.json", "--out", "s.jsonl"]);
    assert_eq!(code, 1);
    let (code, _) = qsynth(d, &["build-dataset", "--problems", "p.json", "--ckpt", "missing.bin", "--out", "x.jsonl"]);
    assert_eq!(code, 3);
    let (code, _) = qsynth(d, &["train-theta", "--ckpt", "ckpt.bin", "--dataset", "ds.jsonl", "--problems", "p.json", "--out", "t.bin"]);
    assert_eq!(code, 1);
    let (code, _) = qsynth(d, &["gen-problems", "--count"]);
    assert_eq!(code, 1);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    front(d);
    let files = ["p.json", "ckpt.bin", "ds.jsonl", "ds.jsonl.meta.json"];
    let first: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(d.join(f)).unwrap()).collect();
    let first_manifest = manifest(d, "ckpt.bin");
    front(d);
    for (f, bytes) in files.iter().zip(&first) {
        assert_eq!(&std::fs::read(d.join(f)).unwrap(), bytes, "{f} changed");
    }
    let again = manifest(d, "ckpt.bin");
    // The metrics file carries wall-clock times; the checkpoint must not move.
    assert_eq!(again.outputs[0], first_manifest.outputs[0]);
    assert_eq!(again.config, first_manifest.config);
}

#[test]
fn verify_tabular_small_run_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["--threads", "1", "verify-tabular", "--trials", "20", "--out", "tab.json"]);
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("tab.json")).unwrap()).unwrap();
    assert_eq!(rep["passed"], true);
}
