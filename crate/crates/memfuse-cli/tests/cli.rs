//! End-to-end tests of the command-line interface: exit codes, the
//! one-JSON-line-per-run stdout contract, and byte reproducibility of
//! primary artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_memfuse"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

/// Parses the single JSON summary line the CLI must print on success.
fn summary(output: &Output) -> Value {
    assert!(output.status.success(), "stderr: {}", stderr(output));
    let stdout = String::from_utf8(output.stdout.clone()).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 1, "expected exactly one stdout line, got {stdout:?}");
    serde_json::from_str(lines[0]).expect("stdout line is JSON")
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn exit_code(output: &Output) -> i32 {
    output.status.code().expect("no signal")
}

fn dir_contents(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push((
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&path).unwrap(),
                ));
            }
        }
    }
    files.sort();
    files
}

fn write_config(dir: &Path, learning_rate: f64, epochs: usize) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(
        &path,
        format!(
            r#"{{
  "model": {{
    "modalities": ["video", "audio", "text"],
    "input_dims": {{"video": 12, "audio": 8, "text": 12}},
    "latent_dim": 8,
    "num_heads": 2,
    "dropout_rate": 0.1,
    "attention_mode": "self_and_cross",
    "fusion_hidden_dim": 8
  }},
  "train": {{
    "epochs": {epochs},
    "batch_size": 16,
    "learning_rate": {learning_rate},
    "early_stop_patience": 5,
    "seed": 7
  }}
}}"#
        ),
    )
    .unwrap();
    path
}

/// Generates a small dataset once per test dir.
fn gen_dataset(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let out = dir.join("data");
    let output = run(&[
        "gen-synthetic",
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let s = summary(&output);
    assert_eq!(s["command"], "gen-synthetic");
    out
}

#[test]
fn gen_synthetic_is_deterministic_and_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let output = run(&[
            "gen-synthetic",
            "--n",
            "100",
            "--seed",
            "1",
            "--out",
            out.to_str().unwrap(),
        ]);
        let s = summary(&output);
        let (lo, hi) = (
            s["label_min"].as_f64().unwrap(),
            s["label_max"].as_f64().unwrap(),
        );
        assert!(lo > 0.0 && hi < 1.0, "labels outside (0,1): {lo} {hi}");
    }
    assert_eq!(dir_contents(&out_a), dir_contents(&out_b));
}

#[test]
fn gen_synthetic_rejects_degenerate_dims() {
    let dir = tempfile::tempdir().unwrap();
    let output = run(&[
        "gen-synthetic",
        "--dims",
        "0,8,8",
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&output), 2);
    assert!(stderr(&output).contains("below the minimum"));
}

#[test]
fn train_is_reproducible_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_dataset(dir.path(), 48, 3);
    let config = write_config(dir.path(), 0.003, 3);
    let train_manifest = data.join("train.jsonl");
    let val_manifest = data.join("validation.jsonl");

    let mut summaries = Vec::new();
    let mut checkpoints = Vec::new();
    for name in ["r1", "r2"] {
        let out = dir.path().join(name);
        let output = run(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--train-manifest",
            train_manifest.to_str().unwrap(),
            "--val-manifest",
            val_manifest.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        let mut s = summary(&output);
        // The checkpoint path differs between runs by construction.
        let checkpoint = s["checkpoint"].as_str().unwrap().to_string();
        s.as_object_mut().unwrap().remove("checkpoint");
        summaries.push(s);
        checkpoints.push(fs::read(checkpoint).unwrap());
        assert!(out.join("trainlog.jsonl").exists());
        assert!(out.join("run.json").exists());
    }
    assert_eq!(summaries[0], summaries[1], "metric JSON differs across runs");
    assert_eq!(checkpoints[0], checkpoints[1], "checkpoints differ across runs");
}

#[test]
fn train_missing_manifest_exits_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 0.003, 1);
    let output = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--train-manifest",
        "/nonexistent/train.jsonl",
        "--val-manifest",
        "/nonexistent/val.jsonl",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&output), 2);
    assert!(stderr(&output).contains("/nonexistent/train.jsonl"));
}

#[test]
fn zero_learning_rate_warns_and_notes_unchanged_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_dataset(dir.path(), 24, 5);
    let config = write_config(dir.path(), 0.0, 1);
    let output = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--train-manifest",
        data.join("train.jsonl").to_str().unwrap(),
        "--val-manifest",
        data.join("validation.jsonl").to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert!(stderr(&output).contains("learning_rate is 0"));
    let s = summary(&output);
    assert!(s["note"].as_str().unwrap().contains("unchanged"));
}

fn train_once(dir: &Path, data: &Path) -> PathBuf {
    let config = write_config(dir, 0.003, 2);
    let out = dir.join("model");
    let output = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--train-manifest",
        data.join("train.jsonl").to_str().unwrap(),
        "--val-manifest",
        data.join("validation.jsonl").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    summary(&output);
    out.join("checkpoint.mmem")
}

#[test]
fn evaluate_and_predict_agree_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_dataset(dir.path(), 32, 7);
    let checkpoint = train_once(dir.path(), &data);
    let test_manifest = data.join("test.jsonl");

    let output = run(&[
        "evaluate",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--manifest",
        test_manifest.to_str().unwrap(),
        "--out",
        dir.path().join("eval").to_str().unwrap(),
    ]);
    let s = summary(&output);
    let n = s["n"].as_u64().unwrap();
    assert!(s["mse"].as_f64().unwrap() >= 0.0);

    // Shuffling the manifest entries must not change the metrics.
    let text = fs::read_to_string(&test_manifest).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let (header, entries) = lines.split_at_mut(1);
    entries.reverse();
    let shuffled = data.join("shuffled.jsonl");
    fs::write(
        &shuffled,
        format!("{}\n{}\n", header[0], entries.join("\n")),
    )
    .unwrap();
    let output2 = run(&[
        "evaluate",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--manifest",
        shuffled.to_str().unwrap(),
        "--out",
        dir.path().join("eval2").to_str().unwrap(),
    ]);
    let s2 = summary(&output2);
    assert_eq!(s["mse"], s2["mse"]);
    assert_eq!(s["spearman"], s2["spearman"]);

    // predict writes one row per manifest entry.
    let output3 = run(&[
        "predict",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--manifest",
        test_manifest.to_str().unwrap(),
        "--out",
        dir.path().join("pred").to_str().unwrap(),
    ]);
    summary(&output3);
    let csv = fs::read_to_string(dir.path().join("pred/predictions.csv")).unwrap();
    assert_eq!(csv.lines().count() as u64, n + 1); // header + rows
}

#[test]
fn evaluate_rejects_modality_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_dataset(dir.path(), 24, 9);
    let checkpoint = train_once(dir.path(), &data);

    // Strip the audio embeddings out of the manifest.
    let text = fs::read_to_string(data.join("test.jsonl")).unwrap();
    let stripped: Vec<String> = text
        .lines()
        .map(|line| {
            if line.starts_with('{') && line.contains("\"embeddings\"") {
                let mut v: Value = serde_json::from_str(line).unwrap();
                v["embeddings"].as_object_mut().unwrap().remove("audio");
                v.to_string()
            } else {
                line.to_string()
            }
        })
        .collect();
    let manifest = data.join("no_audio.jsonl");
    fs::write(&manifest, stripped.join("\n") + "\n").unwrap();

    let output = run(&[
        "evaluate",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        dir.path().join("e").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&output), 2);
    assert!(stderr(&output).contains("audio"));
}

#[test]
fn ablate_emits_twelve_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_dataset(dir.path(), 24, 11);
    let config = write_config(dir.path(), 0.003, 1);
    let out = dir.path().join("ablation");
    let output = bin()
        .args([
            "ablate",
            "--config",
            config.to_str().unwrap(),
            "--train-manifest",
            data.join("train.jsonl").to_str().unwrap(),
            "--val-manifest",
            data.join("validation.jsonl").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .env("MEMFUSE_THREADS", "2")
        .output()
        .unwrap();
    let s = summary(&output);
    assert_eq!(s["rows"], 12);
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13); // header + 12 variants
    assert!(csv.contains("trimodal,"));
    assert!(csv.contains("max_only,"));
}

#[test]
fn analyze_without_metadata_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_dataset(dir.path(), 24, 13);
    let checkpoint = train_once(dir.path(), &data);

    let text = fs::read_to_string(data.join("test.jsonl")).unwrap();
    let stripped: Vec<String> = text
        .lines()
        .map(|line| {
            if line.starts_with('{') && line.contains("\"metadata\"") {
                let mut v: Value = serde_json::from_str(line).unwrap();
                v.as_object_mut().unwrap().remove("metadata");
                v.to_string()
            } else {
                line.to_string()
            }
        })
        .collect();
    let manifest = data.join("no_meta.jsonl");
    fs::write(&manifest, stripped.join("\n") + "\n").unwrap();

    let output = run(&[
        "analyze",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        dir.path().join("a").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&output), 2);
    assert!(stderr(&output).contains("no metadata"));
}

#[test]
fn analyze_writes_reports_for_metadata_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_dataset(dir.path(), 40, 15);
    let checkpoint = train_once(dir.path(), &data);
    let out = dir.path().join("analysis");
    let output = run(&[
        "analyze",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--manifest",
        data.join("test.jsonl").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let s = summary(&output);
    assert_eq!(s["factors"], 6);
    for file in ["factors.csv", "factors.md", "factors.json"] {
        assert!(out.join(file).exists(), "{file} missing");
    }
}

#[test]
fn rank_requires_candidates_and_reranks_when_present() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_dataset(dir.path(), 64, 17);
    let checkpoint = train_once(dir.path(), &data);

    // Plain manifest: no candidates anywhere → usage error.
    let output = run(&[
        "rank",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--manifest",
        data.join("test.jsonl").to_str().unwrap(),
        "--out",
        dir.path().join("r0").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&output), 2);
    assert!(stderr(&output).contains("candidates"));

    // Wire the first two entries as originals with two candidates each.
    let text = fs::read_to_string(data.join("test.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let mut entries: Vec<Value> = lines[1..]
        .iter()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let ids: Vec<String> = entries
        .iter()
        .map(|e| e["id"].as_str().unwrap().to_string())
        .collect();
    for i in 0..2 {
        entries[i]["candidates"] = serde_json::json!([ids[2 + 2 * i], ids[3 + 2 * i]]);
    }
    let manifest = data.join("rank.jsonl");
    let mut body = String::from(lines[0]);
    for e in &entries {
        body.push('\n');
        body.push_str(&e.to_string());
    }
    body.push('\n');
    fs::write(&manifest, body).unwrap();

    let out = dir.path().join("r1");
    let output = run(&[
        "rank",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let s = summary(&output);
    assert_eq!(s["items"], 2);
    let report = fs::read_to_string(out.join("rerank.json")).unwrap();
    assert!(report.contains("best_candidate_id"));
}
