use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use glrcl::baselines::MethodKind;
use glrcl::experiment::{ExperimentConfig, StreamSource, TrainSection};
use glrcl::gmm::EmConfig;
use glrcl::metrics::AccuracyMatrix;
use glrcl::SyntheticShiftSpec;

fn glrcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glrcl")).args(args).output().unwrap()
}

fn spec(domains: usize, seed: u64) -> SyntheticShiftSpec {
    let rotations: Vec<f64> = (0..domains).map(|t| 50.0 * t as f64).collect();
    SyntheticShiftSpec::rotating_two_class(6, &rotations, 1.0, 80, 40, seed)
}

fn config(method: MethodKind, domains: usize) -> ExperimentConfig {
    ExperimentConfig {
        seed: 4,
        method,
        stream: StreamSource::Synthetic(spec(domains, 12)),
        gmm: EmConfig::default(),
        train: TrainSection {
            hidden: vec![16, 8],
            epochs: 2,
            ..TrainSection::default()
        },
        output_dir: Some(PathBuf::from("out")),
    }
}

fn write_config(dir: &Path, name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn run_ok(args: &[&str]) -> String {
    let out = glrcl(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn single_task_naive_writes_one_by_one_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &config(MethodKind::Naive {}, 1));
    run_ok(&["run", "--config", cfg.to_str().unwrap()]);
    let out = dir.path().join("out");
    let csv = std::fs::read_to_string(out.join("accuracy_matrix.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    assert_eq!(csv.trim().split(',').count(), 1);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["bwt"].is_null());
    assert_eq!(metrics["T"], 1);
    assert_eq!(metrics["method"], "naive");
    assert!(metrics["ilm_definition"].as_str().unwrap().contains("lower triangle"));
    assert!(!out.join("pool.gmmpool").exists());
}

#[test]
fn same_config_twice_gives_identical_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &config(MethodKind::Glrcl {}, 2));
    let cfg = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok(&["run", "--config", cfg, "--out", a.to_str().unwrap()]);
    run_ok(&["run", "--config", cfg, "--out", b.to_str().unwrap()]);
    for f in ["accuracy_matrix.csv", "metrics.json", "timeline.csv", "pool.gmmpool", "model.mlp"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn timeline_matches_matrix_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &config(MethodKind::Glrcl {}, 4));
    run_ok(&["run", "--config", cfg.to_str().unwrap()]);
    let out = dir.path().join("out");
    let matrix = AccuracyMatrix::from_csv(&std::fs::read_to_string(out.join("accuracy_matrix.csv")).unwrap()).unwrap();
    let timeline = std::fs::read_to_string(out.join("timeline.csv")).unwrap();
    let rows: Vec<(usize, f64)> = timeline
        .lines()
        .map(|l| {
            let (t, m) = l.split_once(',').unwrap();
            (t.parse().unwrap(), m.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 4);
    for (t, mean) in rows {
        let hand: f64 = (0..=t).map(|j| matrix.get(t, j)).sum::<f64>() / (t + 1) as f64;
        assert!((mean - hand).abs() < 1e-12, "session {t}: {mean} vs {hand}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run_report.json")).unwrap()).unwrap();
    assert_eq!(report["retention"]["retained_raw_samples"], 0);
    assert_eq!(report["generators"].as_array().unwrap().len(), 8);
    // defaults are materialized in the resolved config
    assert_eq!(report["config"]["gmm"]["k_max"], 10);
    assert_eq!(report["config"]["train"]["batch_size"], 64);
}

#[test]
fn joint_writes_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &config(MethodKind::Joint {}, 3));
    run_ok(&["run", "--config", cfg.to_str().unwrap()]);
    let csv = std::fs::read_to_string(dir.path().join("out/accuracy_matrix.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    assert_eq!(csv.trim().split(',').count(), 3);
}

#[test]
fn gen_stream_then_run_from_files_matches_in_memory_run() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = dir.path().join("spec.json");
    std::fs::write(&spec_path, serde_json::to_string(&spec(3, 12)).unwrap()).unwrap();
    let files = dir.path().join("files");
    let listed = run_ok(&["gen-stream", "--spec", spec_path.to_str().unwrap(), "--out", files.to_str().unwrap()]);
    assert_eq!(listed.lines().count(), 6);
    assert_eq!(std::fs::read_dir(&files).unwrap().count(), 6);

    let cfg = write_config(dir.path(), "c.json", &config(MethodKind::Glrcl {}, 3));
    let cfg = cfg.to_str().unwrap();
    let mem = dir.path().join("mem");
    let disk = dir.path().join("disk");
    run_ok(&["run", "--config", cfg, "--out", mem.to_str().unwrap()]);
    run_ok(&[
        "run",
        "--config",
        cfg,
        "--out",
        disk.to_str().unwrap(),
        "--stream-files",
        files.to_str().unwrap(),
    ]);
    for f in ["accuracy_matrix.csv", "pool.gmmpool", "model.mlp"] {
        assert_eq!(std::fs::read(mem.join(f)).unwrap(), std::fs::read(disk.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn invalid_spec_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut bad = spec(2, 1);
    bad.scales[1] = -1.0;
    let spec_path = dir.path().join("spec.json");
    std::fs::write(&spec_path, serde_json::to_string(&bad).unwrap()).unwrap();
    let out = glrcl(&["gen-stream", "--spec", spec_path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut value = serde_json::to_value(config(MethodKind::Naive {}, 1)).unwrap();
    value["train"]["learning_rate"] = serde_json::json!(0.1);
    let path = dir.path().join("c.json");
    std::fs::write(&path, value.to_string()).unwrap();
    let out = glrcl(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn missing_feature_file_is_a_runtime_failure_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(MethodKind::Naive {}, 1);
    cfg.stream = StreamSource::Files(vec![glrcl::experiment::FilePair {
        train: PathBuf::from("missing_train.glrf"),
        eval: PathBuf::from("missing_eval.glrf"),
    }]);
    let path = write_config(dir.path(), "c.json", &cfg);
    let out = glrcl(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn inspect_lists_pool_entries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &config(MethodKind::Glrcl {}, 2));
    run_ok(&["run", "--config", cfg.to_str().unwrap()]);
    let pool = dir.path().join("out/pool.gmmpool");
    let text = run_ok(&["inspect", pool.to_str().unwrap()]);
    assert!(text.contains("entries=4"));
    assert_eq!(text.matches("entry domain=").count(), 4);
    assert_eq!(text.matches("weight_sum=1.000000").count(), 4);

    let bytes = std::fs::read(&pool).unwrap();
    let truncated = dir.path().join("truncated.gmmpool");
    std::fs::write(&truncated, &bytes[..bytes.len() - 3]).unwrap();
    let out = glrcl(&["inspect", truncated.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn inspect_single_generator() {
    let dir = tempfile::tempdir().unwrap();
    let x = glrcl::DenseMatrix::from_rows(&[[0.0, 1.0], [1.0, 0.0], [2.0, 2.5], [0.5, 0.2]]).unwrap();
    let (g, _) = glrcl::select_k(&x, &EmConfig::default(), &mut glrcl::Rng::new(0)).unwrap();
    let path = dir.path().join("one.gmm");
    std::fs::write(&path, g.to_bytes()).unwrap();
    let text = run_ok(&["inspect", path.to_str().unwrap()]);
    assert!(text.starts_with("generator"));
    assert!(text.contains("d=2"));
    assert!(text.contains("fitted_on=4"));
}

#[test]
fn metrics_command_recomputes_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("m.csv");
    std::fs::write(&csv, "90,50,40\n80,95,60\n70,85,92\n").unwrap();
    let out: serde_json::Value = serde_json::from_str(&run_ok(&["metrics", "--matrix", csv.to_str().unwrap()])).unwrap();
    assert!((out["avg_accuracy"].as_f64().unwrap() - 247.0 / 3.0).abs() < 1e-12);
    assert_eq!(out["bwt"].as_f64().unwrap(), -15.0);
    assert!((out["ilm"].as_f64().unwrap() - 512.0 / 6.0).abs() < 1e-12);
    assert_eq!(out["timeline"].as_array().unwrap().len(), 3);

    std::fs::write(&csv, "90,50\n80,x\n").unwrap();
    assert_eq!(glrcl(&["metrics", "--matrix", csv.to_str().unwrap()]).status.code(), Some(1));
}
