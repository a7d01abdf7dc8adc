use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};
use svbnn_cli::{run_experiment, sweep_lambda, ExperimentConfig, LambdaSpec};

fn base_config(out: &Path) -> Value {
    json!({
        "name": "tiny teacher",
        "seed": 3,
        "replications": 2,
        "generator": {"kind": "teacher_sparse", "n": 500, "test_n": 100},
        "model": {"kind": "network", "input_dim": 100, "widths": [5, 5], "activation": "tanh"},
        "prior": {"sigma0_sq": 2.0, "lambda": "opt"},
        "training": {"minibatch_size": 128, "epochs": 3},
        "metrics": {
            "selection": true,
            "predict_samples": 5,
            "coverage": {"coords": [0], "grid_size": 5, "n_mc": 20}
        },
        "output_dir": out,
    })
}

fn write_config(dir: &Path, value: &Value) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn svbnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svbnn"))
        .args(args)
        .env_remove("SVBNN_JOBS")
        .output()
        .expect("binary runs")
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let mut rows = vec![r.headers().unwrap().iter().map(String::from).collect()];
    rows.extend(r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()));
    rows
}

#[test]
fn experiment_writes_provenance_and_aggregates() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), &base_config(&out));
    let o = svbnn(&["experiment", "--config", cfg.to_str().unwrap(), "--jobs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let resolved: Value = serde_json::from_str(&fs::read_to_string(out.join("resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["param_count"], 541);
    assert_eq!(resolved["seeds"], json!([3, 4]));
    assert_eq!(resolved["config"]["prior"]["lambda"], "opt");

    let rows = read_csv(&out.join("results.csv"));
    let header = &rows[0];
    for col in ["config_hash", "seed", "status", "test_rmse", "fpr", "fnr", "coverage_x1", "message"] {
        assert!(header.iter().any(|h| h == col), "missing column {col}");
    }
    let status: Vec<&str> = rows[1..].iter().map(|r| r[3].as_str()).collect();
    assert_eq!(status, ["ok", "ok", "aggregate", "aggregate"]);
    let hash = &rows[1][0];
    assert_eq!(hash.len(), 64);
    assert!(rows[1..].iter().all(|r| &r[0] == hash));

    let json: Value = serde_json::from_str(&fs::read_to_string(out.join("results.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 4);
    for i in 0..2 {
        assert!(out.join(format!("trace_{i}.csv")).exists());
        assert!(out.join(format!("params_{i}.json")).exists());
    }
    assert!(out.join("timing.csv").exists());
    assert!(!out.join(".staging").exists());
}

#[test]
fn opt_lambda_is_resolved_for_the_sparse_nonlinear_network() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let value = json!({
        "replications": 1,
        "generator": {"kind": "sparse_nonlinear", "n": 3000, "test_n": 50},
        "model": {"kind": "network", "input_dim": 200, "widths": [7, 7, 7], "activation": "relu"},
        "training": {"minibatch_size": 512, "epochs": 1},
        "metrics": {"selection": true, "predict_samples": 2},
        "output_dir": out,
    });
    let cfg = write_config(tmp.path(), &value);
    let o = svbnn(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let resolved: Value = serde_json::from_str(&fs::read_to_string(out.join("resolved.json")).unwrap()).unwrap();
    let lambda = resolved["lambda"].as_f64().unwrap();
    assert!((lambda - 1.186e-4).abs() < 1e-7, "lambda {lambda}");
    assert_eq!(resolved["param_count"], 1527);
}

#[test]
fn rerun_is_byte_identical_regardless_of_jobs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for (k, jobs) in ["1", "2"].iter().enumerate() {
        let out = tmp.path().join(format!("run{k}"));
        let cfg = write_config(tmp.path(), &base_config(&out));
        let o = svbnn(&["experiment", "--config", cfg.to_str().unwrap(), "--jobs", jobs]);
        assert!(o.status.success());
        outputs.push((fs::read(out.join("results.csv")).unwrap(), fs::read(out.join("trace_1.csv")).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn single_point_sweep_matches_plain_experiment() {
    let tmp = tempfile::tempdir().unwrap();
    let mut value = base_config(&tmp.path().join("plain"));
    value["metrics"]["coverage"] = Value::Null;
    let mut cfg = ExperimentConfig::from_json(&value.to_string()).unwrap();
    cfg.prior.lambda = LambdaSpec::Value(0.01);
    let plain = run_experiment(&cfg, 1).unwrap();

    cfg.prior.lambda = LambdaSpec::Opt;
    cfg.output_dir = tmp.path().join("sweep");
    let points = sweep_lambda(&cfg, &[LambdaSpec::Value(0.01)], 1).unwrap();
    assert_eq!(points.len(), 1);
    assert_eq!(points[0].lambda, 0.01);
    assert_eq!(
        fs::read(plain.dir.join("results.csv")).unwrap(),
        fs::read(tmp.path().join("sweep/lambda_0/results.csv")).unwrap()
    );
    let sweep = read_csv(&tmp.path().join("sweep/sweep.csv"));
    assert_eq!(sweep.len(), 2);
    assert_eq!(sweep[1][0], "0.01");
}

#[test]
fn sweep_orders_points_by_lambda() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let mut value = base_config(&out);
    value["replications"] = json!(1);
    value["training"]["epochs"] = json!(1);
    value["metrics"]["coverage"] = Value::Null;
    let cfg = write_config(tmp.path(), &value);
    let o = svbnn(&["sweep-lambda", "--config", cfg.to_str().unwrap(), "--lambdas", "0.5,opt,1e-20"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&out.join("sweep.csv"));
    let lambdas: Vec<f64> = rows[1..].iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(lambdas.len(), 3);
    assert!(lambdas.windows(2).all(|w| w[0] < w[1]));
    assert!(out.join("lambda_2/results.csv").exists());
}

#[test]
fn failed_replication_leaves_a_marker_row() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let mut value = base_config(&out);
    value["training"]["sigma_eps"] = json!(1e-200);
    value["metrics"]["coverage"] = Value::Null;
    let cfg = write_config(tmp.path(), &value);
    let o = svbnn(&["experiment", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success());
    let rows = read_csv(&out.join("results.csv"));
    let msg = rows[0].iter().position(|h| h == "message").unwrap();
    assert_eq!(rows[1][3], "failed");
    assert!(!rows[1][msg].is_empty());
    assert_eq!(rows[1][4], "");
    assert!(String::from_utf8_lossy(&o.stdout).contains("(2 failed)"));
}

#[test]
fn unknown_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let mut value = base_config(&tmp.path().join("run"));
    value["training"]["learning_rat"] = json!(0.1);
    let cfg = write_config(tmp.path(), &value);
    let o = svbnn(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rat"));
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn generate_writes_train_and_test_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    let cfg = write_config(tmp.path(), &base_config(&out));
    let o = svbnn(&["generate", "--config", cfg.to_str().unwrap(), "--seed", "9"]);
    assert!(o.status.success());
    let train = read_csv(&out.join("train.csv"));
    let test = read_csv(&out.join("test.csv"));
    assert_eq!(train.len(), 501);
    assert_eq!(test.len(), 101);
    assert_eq!(train[0].len(), 101);
    let meta: Value = serde_json::from_str(&fs::read_to_string(out.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 9);
}

#[test]
fn coverage_command_summarizes_each_coordinate() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("cov");
    let mut value = base_config(&out);
    value["metrics"]["coverage"]["coords"] = json!([0, 2]);
    let cfg = write_config(tmp.path(), &value);
    let o = svbnn(&["coverage", "--config", cfg.to_str().unwrap(), "--replications", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&out.join("coverage.csv"));
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1][2], "x1");
    assert_eq!(rows[2][2], "x3");
    let rate: f64 = rows[1][5].parse().unwrap();
    assert!((0.0..=100.0).contains(&rate));
}

#[test]
fn coverage_without_settings_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut value = base_config(&tmp.path().join("run"));
    value["metrics"]["coverage"] = Value::Null;
    let cfg = write_config(tmp.path(), &value);
    let o = svbnn(&["coverage", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("metrics.coverage"));
}
