//! End-to-end command tests driving the compiled binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_m3dn"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_gen_config(dir: &Path, bags: usize, labeled_fraction: f64) -> PathBuf {
    let path = dir.join("gen.json");
    let config = format!(
        r#"{{
            "label_count": 3,
            "bag_count": {bags},
            "instance_count_range": [1, 3],
            "feature_dims": [5, 4],
            "latent_label_correlation": {{"random_psd": {{"seed": 5}}}},
            "noise_level": 0.05,
            "labeled_fraction": {labeled_fraction},
            "test_fraction": 0.3,
            "seed": 11
        }}"#
    );
    std::fs::write(&path, config).unwrap();
    path
}

fn write_train_config(dir: &Path, max_epochs: usize) -> PathBuf {
    let path = dir.join("train.json");
    let config = format!(
        r#"{{
            "max_epochs": {max_epochs},
            "batch_size": 8,
            "hidden_dims": [6, 4],
            "learning_rate": 0.3,
            "seed": 2
        }}"#
    );
    std::fs::write(&path, config).unwrap();
    path
}

/// gen + train on a small dataset, returning the run directory.
fn trained_run(dir: &Path, epochs: usize) -> PathBuf {
    let gen_cfg = write_gen_config(dir, 60, 0.8);
    let data = dir.join("data.jsonl");
    assert_exit(&run(&["gen", gen_cfg.to_str().unwrap(), data.to_str().unwrap()]), 0);
    let train_cfg = write_train_config(dir, epochs);
    let out_dir = dir.join("run");
    assert_exit(
        &run(&[
            "train",
            dir.join("data.train.jsonl").to_str().unwrap(),
            train_cfg.to_str().unwrap(),
            out_dir.to_str().unwrap(),
        ]),
        0,
    );
    out_dir
}

#[test]
fn gen_writes_dataset_split_files_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_gen_config(tmp.path(), 40, 0.5);
    let out = tmp.path().join("data.jsonl");
    assert_exit(&run(&["gen", cfg.to_str().unwrap(), out.to_str().unwrap()]), 0);
    for name in ["data.jsonl", "data.train.jsonl", "data.test.jsonl", "data.manifest.json"] {
        assert!(tmp.path().join(name).exists(), "{name} missing");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("data.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "gen");
    assert_eq!(manifest["artifacts"].as_array().unwrap().len(), 3);
}

#[test]
fn gen_rejects_out_of_range_labeled_fraction() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_gen_config(tmp.path(), 40, 1.5);
    let out = tmp.path().join("data.jsonl");
    let result = run(&["gen", cfg.to_str().unwrap(), out.to_str().unwrap()]);
    assert_exit(&result, 2);
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("labeled_fraction"), "stderr: {stderr}");
}

#[test]
fn gen_is_byte_deterministic_for_a_fixed_seed() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_gen_config(tmp.path(), 40, 0.5);
    let a = tmp.path().join("a.jsonl");
    let b = tmp.path().join("b.jsonl");
    assert_exit(&run(&["gen", cfg.to_str().unwrap(), a.to_str().unwrap()]), 0);
    assert_exit(&run(&["gen", cfg.to_str().unwrap(), b.to_str().unwrap()]), 0);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn gen_seed_flag_overrides_the_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_gen_config(tmp.path(), 40, 0.5);
    let a = tmp.path().join("a.jsonl");
    let b = tmp.path().join("b.jsonl");
    assert_exit(&run(&["gen", cfg.to_str().unwrap(), a.to_str().unwrap()]), 0);
    assert_exit(
        &run(&["gen", cfg.to_str().unwrap(), b.to_str().unwrap(), "--seed", "99"]),
        0,
    );
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn train_with_zero_epochs_writes_the_initial_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let out_dir = trained_run(tmp.path(), 0);
    for name in ["checkpoint.json", "epochs.jsonl", "kernel.csv", "cost.csv", "manifest.json"] {
        assert!(out_dir.join(name).exists(), "{name} missing");
    }
    assert_eq!(std::fs::read_to_string(out_dir.join("epochs.jsonl")).unwrap(), "");
}

#[test]
fn train_epoch_log_has_one_json_line_per_epoch() {
    let tmp = TempDir::new().unwrap();
    let out_dir = trained_run(tmp.path(), 3);
    let log = std::fs::read_to_string(out_dir.join("epochs.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 3);
    for (i, line) in lines.iter().enumerate() {
        let entry: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(entry["epoch"], i as u64 + 1);
        assert!(entry["objective"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn train_rejects_a_bad_config_with_exit_2() {
    let tmp = TempDir::new().unwrap();
    let gen_cfg = write_gen_config(tmp.path(), 40, 0.8);
    let data = tmp.path().join("data.jsonl");
    assert_exit(&run(&["gen", gen_cfg.to_str().unwrap(), data.to_str().unwrap()]), 0);
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"learning_rate": -1.0}"#).unwrap();
    let result = run(&[
        "train",
        tmp.path().join("data.train.jsonl").to_str().unwrap(),
        bad.to_str().unwrap(),
        tmp.path().join("run").to_str().unwrap(),
    ]);
    assert_exit(&result, 2);
}

#[test]
fn train_on_a_missing_dataset_exits_1() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_train_config(tmp.path(), 1);
    let result = run(&[
        "train",
        tmp.path().join("nope.jsonl").to_str().unwrap(),
        cfg.to_str().unwrap(),
        tmp.path().join("run").to_str().unwrap(),
    ]);
    assert_exit(&result, 1);
}

#[test]
fn eval_writes_three_source_reports_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let out_dir = trained_run(tmp.path(), 2);
    let report = tmp.path().join("report.json");
    let checkpoint = out_dir.join("checkpoint.json");
    let test_set = tmp.path().join("data.test.jsonl");
    let args = [
        "eval",
        checkpoint.to_str().unwrap(),
        test_set.to_str().unwrap(),
        report.to_str().unwrap(),
    ];
    assert_exit(&run(&args), 0);
    let first = std::fs::read(&report).unwrap();
    let reports: serde_json::Value = serde_json::from_slice(&first).unwrap();
    let sources: Vec<&str> = reports
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["source"].as_str().unwrap())
        .collect();
    assert_eq!(sources, ["modality-1", "modality-2", "fused"]);
    let csv = std::fs::read_to_string(tmp.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    assert_exit(&run(&args), 0);
    assert_eq!(std::fs::read(&report).unwrap(), first);
}

#[test]
fn eval_on_an_unlabeled_dataset_reports_an_empty_evaluation_set() {
    let tmp = TempDir::new().unwrap();
    let out_dir = trained_run(tmp.path(), 1);
    // Strip every label to make the dataset unusable for scoring.
    let text = std::fs::read_to_string(tmp.path().join("data.test.jsonl")).unwrap();
    let stripped: Vec<String> = text
        .lines()
        .map(|line| {
            let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
            if let Some(obj) = v.as_object_mut() {
                obj.remove("labels");
            }
            serde_json::to_string(&v).unwrap()
        })
        .collect();
    let unlabeled = tmp.path().join("unlabeled.jsonl");
    std::fs::write(&unlabeled, stripped.join("\n") + "\n").unwrap();
    let result = run(&[
        "eval",
        out_dir.join("checkpoint.json").to_str().unwrap(),
        unlabeled.to_str().unwrap(),
        tmp.path().join("report.json").to_str().unwrap(),
    ]);
    assert_exit(&result, 2);
    assert!(String::from_utf8_lossy(&result.stderr).contains("empty evaluation set"));
}

#[test]
fn inspect_metric_exports_three_csvs_with_a_symmetric_cost() {
    let tmp = TempDir::new().unwrap();
    let out_dir = trained_run(tmp.path(), 2);
    let stem = tmp.path().join("metric");
    assert_exit(
        &run(&[
            "inspect-metric",
            out_dir.join("checkpoint.json").to_str().unwrap(),
            stem.to_str().unwrap(),
        ]),
        0,
    );
    for suffix in ["-s.csv", "-m.csv", "-correlation.csv"] {
        assert!(tmp.path().join(format!("metric{suffix}")).exists());
    }

    // Re-parse M and check the cost-matrix invariants hold.
    let m_text = std::fs::read_to_string(tmp.path().join("metric-m.csv")).unwrap();
    let rows: Vec<Vec<f64>> = m_text
        .lines()
        .skip(1)
        .map(|line| line.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    let l = rows.len();
    for i in 0..l {
        assert_eq!(rows[i].len(), l);
        assert_eq!(rows[i][i], 0.0);
        for j in 0..l {
            assert!(rows[i][j] >= 0.0);
            assert!((rows[i][j] - rows[j][i]).abs() < 1e-12);
        }
    }

    // Correlation view stays inside [-1, 1] with a unit diagonal.
    let corr_text = std::fs::read_to_string(tmp.path().join("metric-correlation.csv")).unwrap();
    assert!(corr_text.starts_with('#'));
    for (i, line) in corr_text.lines().skip(2).enumerate() {
        for (j, v) in line.split(',').enumerate() {
            let v: f64 = v.parse().unwrap();
            assert!((-1.0..=1.0).contains(&v));
            if i == j {
                assert_eq!(v, 1.0);
            }
        }
    }
}

#[test]
fn threads_flag_and_env_are_accepted_and_recorded() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_gen_config(tmp.path(), 40, 0.5);
    let out = tmp.path().join("data.jsonl");
    assert_exit(
        &run(&["--threads", "2", "gen", cfg.to_str().unwrap(), out.to_str().unwrap()]),
        0,
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("data.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["threads"], 2);

    let result = bin()
        .env("M3DN_THREADS", "4")
        .args(["gen", cfg.to_str().unwrap(), out.to_str().unwrap()])
        .output()
        .unwrap();
    assert_exit(&result, 0);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("data.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["threads"], 4);
}

#[test]
fn gzip_dataset_paths_round_trip_through_gen_and_train() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_gen_config(tmp.path(), 40, 0.8);
    let out = tmp.path().join("data.jsonl.gz");
    assert_exit(&run(&["gen", cfg.to_str().unwrap(), out.to_str().unwrap()]), 0);
    assert!(tmp.path().join("data.train.jsonl.gz").exists());
    let train_cfg = write_train_config(tmp.path(), 1);
    assert_exit(
        &run(&[
            "train",
            tmp.path().join("data.train.jsonl.gz").to_str().unwrap(),
            train_cfg.to_str().unwrap(),
            tmp.path().join("run").to_str().unwrap(),
        ]),
        0,
    );
}
