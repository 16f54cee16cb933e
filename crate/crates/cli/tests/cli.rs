//! CLI surface tests: artifact layout, flag handling, and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tal"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn generate_writes_both_preset_splits_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let out1 = dir.path().join("a");
    let out2 = dir.path().join("b");
    for out in [&out1, &out2] {
        assert_ok(&tal(&[
            "generate",
            "--preset",
            "pixel3",
            "--seed",
            "9",
            "--out",
            out.to_str().unwrap(),
        ]));
    }
    for split in ["train", "test"] {
        assert!(out1.join(split).join("annotations.json").exists());
        assert!(out1.join(split).join("dataset.json").exists());
        let a = fs::read(out1.join(split).join("annotations.json")).unwrap();
        let b = fs::read(out2.join(split).join("annotations.json")).unwrap();
        assert_eq!(a, b, "{split} annotations differ between identical runs");
    }
}

#[test]
fn train_emits_the_full_artifact_set() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_ok(&tal(&[
        "generate",
        "--preset",
        "pixel3",
        "--seed",
        "2",
        "--out",
        data.to_str().unwrap(),
    ]));
    let run = dir.path().join("run");
    assert_ok(&tal(&[
        "train",
        "--preset",
        "pixel3",
        "--seed",
        "2",
        "--out",
        run.to_str().unwrap(),
        "--data",
        data.join("train").to_str().unwrap(),
    ]));
    for artifact in [
        "manifest.json",
        "shape_trace.json",
        "history.jsonl",
        "checkpoint_step1.talc",
        "checkpoint_step2.talc",
        "checkpoint_step3.talc",
    ] {
        assert!(run.join(artifact).exists(), "missing {artifact}");
    }
    // history phases arrive in schedule order
    let history = fs::read_to_string(run.join("history.jsonl")).unwrap();
    let phases: Vec<String> = history
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["phase"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    let mut sorted = phases.clone();
    sorted.sort();
    assert_eq!(phases, sorted);
}

#[test]
fn overrides_are_recorded_in_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_ok(&tal(&[
        "generate",
        "--preset",
        "pixel3",
        "--seed",
        "3",
        "--out",
        data.to_str().unwrap(),
    ]));
    let run = dir.path().join("run");
    assert_ok(&tal(&[
        "train",
        "--preset",
        "pixel3",
        "--seed",
        "3",
        "--out",
        run.to_str().unwrap(),
        "--data",
        data.join("train").to_str().unwrap(),
        "--alpha",
        "3",
        "--n",
        "65",
        "--iters1",
        "1",
        "--iters2",
        "1",
        "--iters3",
        "1",
    ]));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["model"]["alpha"], 3);
    assert_eq!(manifest["config"]["model"]["recode_dim"], 65);
    assert_eq!(manifest["schema_version"], 1);

    // the shape trace reflects the overridden geometry
    let trace: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("shape_trace.json")).unwrap()).unwrap();
    assert_eq!(trace[0]["layer"], "conv1");
}

#[test]
fn detect_and_eval_produce_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_ok(&tal(&[
        "generate", "--preset", "pixel3", "--seed", "4", "--out", data.to_str().unwrap(),
    ]));
    let run = dir.path().join("run");
    assert_ok(&tal(&[
        "train",
        "--preset",
        "pixel3",
        "--seed",
        "4",
        "--out",
        run.to_str().unwrap(),
        "--data",
        data.join("train").to_str().unwrap(),
    ]));
    let det = run.join("detections.jsonl");
    assert_ok(&tal(&[
        "detect",
        "--checkpoint",
        run.join("checkpoint_step3.talc").to_str().unwrap(),
        "--data",
        data.join("test").to_str().unwrap(),
        "--out",
        det.to_str().unwrap(),
    ]));
    assert!(det.exists());
    let metrics = run.join("metrics.csv");
    let out = tal(&[
        "eval",
        "--detections",
        det.to_str().unwrap(),
        "--data",
        data.join("test").to_str().unwrap(),
        "--out",
        metrics.to_str().unwrap(),
        "--thresholds",
        "0.3,0.5",
    ]);
    assert_ok(&out);
    let csv = fs::read_to_string(&metrics).unwrap();
    assert!(csv.starts_with("class,0.30,0.50"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("mAP@0.50"));
}

#[test]
fn sweep_accepts_the_documented_n_grid() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_ok(&tal(&[
        "generate", "--preset", "pixel3", "--seed", "6", "--out", data.to_str().unwrap(),
    ]));
    let csv_path = dir.path().join("sweep.csv");
    assert_ok(&tal(&[
        "sweep",
        "--preset",
        "pixel3",
        "--seed",
        "6",
        "--out",
        csv_path.to_str().unwrap(),
        "--alphas",
        "1",
        "--ns",
        "9,17,33,65,129",
        "--methods",
        "average",
        "--data",
        data.join("train").to_str().unwrap(),
        "--test-data",
        data.join("test").to_str().unwrap(),
        "--iters1",
        "1",
        "--iters2",
        "1",
        "--iters3",
        "1",
    ]));
    let csv = fs::read_to_string(&csv_path).unwrap();
    assert_eq!(csv.lines().count(), 6, "header plus five n cells");
}

#[test]
fn usage_errors_exit_with_code_2() {
    // clap-level: missing required flag
    let out = tal(&["train"]);
    assert_eq!(out.status.code(), Some(2));
    // unknown subcommand
    let out = tal(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    // semantic flag error: unknown preset
    let dir = tempfile::tempdir().unwrap();
    let out = tal(&[
        "generate",
        "--preset",
        "never-heard-of-it",
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    // semantic flag error: bad mode
    let out = tal(&[
        "generate",
        "--mode",
        "hologram",
        "--out",
        dir.path().join("y").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_code_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = tal(&[
        "detect",
        "--checkpoint",
        dir.path().join("missing.talc").to_str().unwrap(),
        "--data",
        dir.path().join("missing-data").to_str().unwrap(),
        "--out",
        dir.path().join("out.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));

    let out = tal(&[
        "eval",
        "--detections",
        dir.path().join("missing.jsonl").to_str().unwrap(),
        "--data",
        dir.path().join("missing-data").to_str().unwrap(),
        "--out",
        dir.path().join("m.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn checkpoints_reject_mismatched_configs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_ok(&tal(&[
        "generate", "--preset", "pixel3", "--seed", "8", "--out", data.to_str().unwrap(),
    ]));
    let run = dir.path().join("run");
    assert_ok(&tal(&[
        "train",
        "--preset",
        "pixel3",
        "--seed",
        "8",
        "--out",
        run.to_str().unwrap(),
        "--data",
        data.join("train").to_str().unwrap(),
        "--iters1",
        "1",
        "--iters2",
        "1",
        "--iters3",
        "1",
    ]));
    // tamper with the manifest config so its hash no longer matches
    let manifest_path = run.join("manifest.json");
    let mut manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&manifest_path).unwrap()).unwrap();
    manifest["config"]["detect"]["nms_threshold"] = serde_json::json!(0.6);
    manifest["config_hash"] = serde_json::json!(12345u64);
    fs::write(&manifest_path, serde_json::to_string(&manifest).unwrap()).unwrap();
    let out = tal(&[
        "detect",
        "--checkpoint",
        run.join("checkpoint_step3.talc").to_str().unwrap(),
        "--data",
        data.join("test").to_str().unwrap(),
        "--out",
        run.join("d.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config hash"));
}

#[test]
fn out_root_env_var_redirects_relative_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tal"))
        .args(["generate", "--preset", "pixel3", "--seed", "1", "--out", "nested/data"])
        .env("TAL_OUT_ROOT", dir.path())
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("nested/data/train/annotations.json").exists());
    assert!(!Path::new("nested/data").exists(), "wrote outside the root");
}
