use std::path::Path;
use std::process::{Command, Output};

fn hrc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hrc")).args(args).output().unwrap()
}

fn out_arg(dir: &Path) -> String {
    dir.to_str().unwrap().to_string()
}

#[test]
fn validate_reports_desktop_library() {
    let out = hrc(&["validate"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "6 plans, identifiable");
}

#[test]
fn unknown_flag_exits_with_usage_error() {
    let out = hrc(&["robustness", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn bad_config_exits_2_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"threshold": 1.5}"#).unwrap();
    let out_dir = dir.path().join("out");
    let out = hrc(&["--config", config.to_str().unwrap(), "threshold", "--out", &out_arg(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());

    std::fs::write(&config, r#"{"no_such_field": 1}"#).unwrap();
    let out = hrc(&["--config", config.to_str().unwrap(), "validate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn empty_sweep_leaves_no_files() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = hrc(&["robustness", "--trials-per-plan", "0", "--out", &out_arg(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = hrc(&[
        "run",
        "--prediction",
        "--trajectory",
        dir.path().join("absent.json").to_str().unwrap(),
        "--out",
        &out_arg(&dir.path().join("out")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn robustness_csv_has_one_row_per_delta() {
    let dir = tempfile::tempdir().unwrap();
    let out = hrc(&[
        "robustness",
        "--deltas",
        "0,-5,-10,-15,-20,-30,-40,-45",
        "--trials-per-plan",
        "1",
        "--out",
        &out_arg(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut reader = csv::Reader::from_path(dir.path().join("robustness.csv")).unwrap();
    assert_eq!(reader.headers().unwrap(), vec!["delta", "mc_accuracy", "pr_accuracy"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 8);
    assert_eq!(&rows[5][0], "-30");
    for r in &rows {
        for v in [&r[1], &r[2]] {
            let x: f64 = v.parse().unwrap();
            assert!((0.0..=1.0).contains(&x));
        }
    }
}

#[test]
fn efficiency_means_recount_from_trials() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    // Noisy observations so completion times vary across trials.
    std::fs::write(&config, r#"{"observation": "channel", "delta": -20}"#).unwrap();
    let out = hrc(&[
        "--config",
        config.to_str().unwrap(),
        "efficiency",
        "--trials",
        "4",
        "--seed",
        "9",
        "--out",
        &out_arg(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let mut trials = csv::Reader::from_path(dir.path().join("efficiency_trials.csv")).unwrap();
    let mut sums: Vec<((String, String), Vec<f64>)> = Vec::new();
    for r in trials.records() {
        let r = r.unwrap();
        let key = (r[0].to_string(), r[1].to_string());
        let t: f64 = r[5].parse().unwrap();
        match sums.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(t),
            None => sums.push((key, vec![t])),
        }
    }
    assert_eq!(sums.len(), 6);

    let mut groups = csv::Reader::from_path(dir.path().join("efficiency.csv")).unwrap();
    let header = groups.headers().unwrap().clone();
    assert_eq!(&header[0], "mode");
    let mut n = 0;
    for r in groups.records() {
        let r = r.unwrap();
        let key = (r[0].to_string(), r[2].to_string());
        let times = &sums.iter().find(|(k, _)| *k == key).unwrap().1;
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        let want: f64 = r[4].parse().unwrap();
        assert!((mean - want).abs() < 1e-3, "{key:?}: {mean} vs {want}");
        assert_eq!(r[3].parse::<usize>().unwrap(), times.len());
        n += 1;
    }
    assert_eq!(n, 6);
}

#[test]
fn metadata_echoes_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = hrc(&["run", "--mode", "oracle", "--seed", "3", "--out", &out_arg(dir.path())]);
    assert!(out.status.success());
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["command"], "run");
    assert_eq!(meta["config"]["seed"], 3);
    assert_eq!(meta["config"]["threshold"], 0.7);
    assert_eq!(meta["config"]["lambda_d"], 20.0);
    assert_eq!(meta["value_model"]["beta"], 5.0);
    assert_eq!(meta["library"]["plans"].as_array().unwrap().len(), 6);
    assert!(meta["step_pattern"].is_object());

    let trace = std::fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(trace.lines().count() as u64, summary["ticks"].as_u64().unwrap());
}

#[test]
fn trained_models_drive_a_trial() {
    let dir = tempfile::tempdir().unwrap();
    let models = dir.path().join("models");
    let out = hrc(&[
        "train",
        "--windows-per-class",
        "10",
        "--epochs",
        "5",
        "--trajectory-windows",
        "60",
        "--trajectory-epochs",
        "2",
        "--out",
        &out_arg(&models),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"observation": "classifier", "plan": 2}"#).unwrap();
    let out = hrc(&[
        "--config",
        config.to_str().unwrap(),
        "run",
        "--prediction",
        "--classifier",
        models.join("classifier.json").to_str().unwrap(),
        "--trajectory",
        models.join("trajectory.json").to_str().unwrap(),
        "--out",
        &out_arg(&dir.path().join("run")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("run/trace.jsonl").exists());
}
