use std::path::{Path, PathBuf};
use std::process::Command;

use hat::dataio::{load_manifest, load_records, save_manifest};
use hat::model::load_checkpoint;
use hat_cli::RunConfig;

fn hat(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_hat")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = hat(args);
    assert!(
        out.status.success(),
        "hat {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn echo(dir: &Path) -> RunConfig {
    RunConfig::load(&dir.join("config.json")).unwrap()
}

/// Synthesizes a dataset and trains a zero-epoch model on it.
fn setup(root: &Path, condition: &str, n_images: &str, extra: &[&str]) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    let mut args = vec![
        "synth",
        "--out",
        p(&data),
        "--seed",
        "2",
        "--n-images",
        n_images,
        "--condition",
        condition,
    ];
    args.extend_from_slice(extra);
    ok(&args);
    let manifest = data.join("manifest.jsonl");
    let train = root.join("train");
    ok(&[
        "train",
        "--out",
        p(&train),
        "--manifest",
        p(&manifest),
        "--canvas",
        "64x64",
        "--channels",
        "8",
        "--mlp-hidden",
        "16",
        "--epochs",
        "0",
    ]);
    (manifest, train.join("model.ckpt"))
}

#[test]
fn synth_manifest_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "synth",
        "--out",
        p(&data),
        "--seed",
        "4",
        "--n-images",
        "2",
        "--tasks",
        "red,green",
    ]);
    let m = load_manifest(&data.join("manifest.jsonl")).unwrap();
    let mut tasks = m.tasks.clone();
    tasks.sort();
    assert_eq!(tasks, ["green", "red"]);
    let copy = data.join("copy.jsonl");
    save_manifest(&m, &copy).unwrap();
    let again = load_manifest(&copy).unwrap();
    assert_eq!(m.records, again.records);
    let cfg = echo(&data);
    assert_eq!((cfg.command.as_str(), cfg.seed, cfg.n_images), ("synth", 4, 2));
}

#[test]
fn zero_epoch_training_writes_an_untrained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ckpt) = setup(dir.path(), "TP", "3", &[]);
    let (model, tasks) = load_checkpoint::<f32>(&ckpt).unwrap();
    assert_eq!(model.config().canvas, (64, 64));
    assert_eq!(tasks, vec!["red".to_string()]);
    let log = std::fs::read_to_string(ckpt.with_file_name("loss.jsonl")).unwrap();
    assert!(log.is_empty());
}

#[test]
fn training_logs_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _) = setup(dir.path(), "TP", "3", &[]);
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "train",
            "--out",
            p(&out),
            "--manifest",
            p(&manifest),
            "--canvas",
            "64x64",
            "--channels",
            "8",
            "--mlp-hidden",
            "16",
            "--epochs",
            "2",
            "--batch-size",
            "4",
            "--seed",
            "11",
        ]);
        std::fs::read(out.join("loss.jsonl")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    assert!(!a.is_empty());
    assert_eq!(a, b);
    let lines = String::from_utf8(a).unwrap();
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    for key in ["epoch", "step", "L_fix", "L_term", "L"] {
        assert!(first.get(key).is_some(), "{key}");
    }
}

#[test]
fn generation_respects_condition_caps() {
    for (condition, cap) in [("TP", 6), ("TA", 10), ("FV", 20)] {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, ckpt) = setup(dir.path(), condition, "3", &[]);
        let out = dir.path().join("gen");
        ok(&[
            "generate",
            "--out",
            p(&out),
            "--manifest",
            p(&manifest),
            "--checkpoint",
            p(&ckpt),
            "--threshold",
            "0.99999",
        ]);
        let records = load_records(&out.join("scanpaths.jsonl")).unwrap();
        assert_eq!(records.len(), 3, "{condition}");
        for (i, w) in records.into_iter().enumerate() {
            let r = w.into_record(&format!("line {i}")).unwrap();
            assert_eq!(r.fixations.len(), cap + 1, "{condition}");
            assert!(!r.terminated);
        }
    }
}

#[test]
fn ground_truth_against_itself_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _) = setup(dir.path(), "TP", "3", &["--subjects-per-image", "1"]);
    let m = load_manifest(&manifest).unwrap();
    let preds = dir.path().join("preds.jsonl");
    let lines: Vec<String> = m
        .records
        .iter()
        .map(|r| serde_json::to_string(&r.to_wire()).unwrap())
        .collect();
    std::fs::write(&preds, lines.join("\n") + "\n").unwrap();
    let out = dir.path().join("eval");
    ok(&[
        "evaluate",
        "--out",
        p(&out),
        "--manifest",
        p(&manifest),
        "--predictions",
        p(&preds),
    ]);
    let rep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(rep["summary"]["ss"].as_f64(), Some(1.0));
    assert_eq!(rep["summary"]["semss"].as_f64(), Some(1.0));
    assert!(std::fs::read_to_string(out.join("report.csv"))
        .unwrap()
        .contains("\nall,"));
}

#[test]
fn baseline_scored_against_itself_has_zero_information_gain() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _) = setup(dir.path(), "TP", "3", &[]);
    let out = dir.path().join("eval");
    ok(&[
        "evaluate",
        "--out",
        p(&out),
        "--manifest",
        p(&manifest),
        "--baseline-manifest",
        p(&manifest),
        "--canvas",
        "64x64",
    ]);
    let rep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(rep["summary"]["cig"].as_f64().unwrap().abs() < 1e-9);
    assert!(out.join("conditional_steps.json").exists());
}

#[test]
fn generate_dumps_heatmaps_and_contributions() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, ckpt) = setup(dir.path(), "TP", "1", &[]);
    let out = dir.path().join("gen");
    ok(&[
        "generate",
        "--out",
        p(&out),
        "--manifest",
        p(&manifest),
        "--checkpoint",
        p(&ckpt),
        "--max-len",
        "2",
        "--dump-heatmaps",
        "--dump-contributions",
    ]);
    let count = |d: &str| std::fs::read_dir(out.join(d)).map(|r| r.count()).unwrap_or(0);
    assert!(count("heatmaps") >= 1);
    assert!(out.join("contributions/matrix__red.csv").exists());
    let inspect = dir.path().join("inspect");
    ok(&[
        "inspect",
        "--out",
        p(&inspect),
        "--manifest",
        p(&manifest),
        "--checkpoint",
        p(&ckpt),
    ]);
    for f in [
        "model.json",
        "contribution_map.json",
        "contribution_map.pgm",
        "contribution_matrix.csv",
    ] {
        assert!(inspect.join(f).exists(), "{f}");
    }
}

#[test]
fn exit_status_reflects_checks_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let pass = hat(&[
        "gradcheck",
        "--out",
        p(&dir.path().join("a")),
        "--precision",
        "f64",
        "--model-samples",
        "2",
    ]);
    assert_eq!(pass.status.code(), Some(0), "{}", String::from_utf8_lossy(&pass.stderr));
    // A huge step makes central differences disagree with the backward pass.
    let fail = hat(&[
        "gradcheck",
        "--out",
        p(&dir.path().join("b")),
        "--precision",
        "f64",
        "--model-samples",
        "2",
        "--grad-eps",
        "0.5",
    ]);
    assert_eq!(fail.status.code(), Some(1));
    assert!(dir.path().join("b/gradcheck.json").exists());
    let err = hat(&["train", "--out", p(&dir.path().join("c"))]);
    assert_eq!(err.status.code(), Some(2));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.json");
    std::fs::write(&cfg_path, r#"{"seed": 5, "n_images": 1, "blob_radius": 5.0}"#).unwrap();
    let out = dir.path().join("out");
    ok(&["synth", "--config", p(&cfg_path), "--out", p(&out), "--seed", "9"]);
    let cfg = echo(&out);
    assert_eq!((cfg.seed, cfg.n_images, cfg.blob_radius), (9, 1, 5.0));
    std::fs::write(&cfg_path, r#"{"seeed": 5}"#).unwrap();
    assert_eq!(
        hat(&["synth", "--config", p(&cfg_path), "--out", p(&out)])
            .status
            .code(),
        Some(2)
    );
}
