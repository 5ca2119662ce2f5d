use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fedcap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedcap")).args(args).output().expect("binary runs")
}

fn quick_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quick.json")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn keygen_demo_prints_hex_records() {
    let out = fedcap(&["keygen-demo", "--bits", "64"]);
    assert!(out.status.success());
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for field in ["n", "g"] {
        assert!(json["public"][field].as_str().unwrap().chars().all(|c| c.is_ascii_hexdigit()));
    }
    for field in ["n", "g", "lambda", "p", "q"] {
        assert!(json["private"][field].is_string(), "{field}");
    }
    assert_eq!(fedcap(&["keygen-demo", "--bits", "8"]).status.code(), Some(1));
}

#[test]
fn run_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = fedcap(&["run", "--config", path(&quick_config()), "--out-dir", path(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(csv.starts_with(
        "round,test_accuracy,test_loss,clustered,bytes_up,bytes_down,cluster_count_so_far,wall_seconds\n"
    ));
    assert_eq!(csv.lines().count(), 1 + 8);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["rounds"], 8);
}

#[test]
fn invalid_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{ "seed": 1, "dataset": { "kind": "synthetic" }, "n_clients": 4, "rounds": 2, "train": { "learning_rate": -1 } }"#,
    )
    .unwrap();
    let out = fedcap(&["run", "--config", path(&bad), "--out-dir", path(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/train/learning_rate"));
    assert_eq!(fedcap(&["run", "--bogus"]).status.code(), Some(1));
}

#[test]
fn runtime_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = fedcap(&["run", "--config", path(&missing), "--out-dir", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let idx = dir.path().join("idx.json");
    std::fs::write(
        &idx,
        r#"{ "seed": 1, "n_clients": 2, "rounds": 1, "protocol": { "num_clusters": 2 },
             "dataset": { "kind": "idx", "train_images": "nope", "train_labels": "nope",
                          "test_images": "nope", "test_labels": "nope" } }"#,
    )
    .unwrap();
    let out = fedcap(&["run", "--config", path(&idx), "--out-dir", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn partition_lists_every_client() {
    let dir = tempfile::tempdir().unwrap();
    let out_file = dir.path().join("partition.json");
    let out = fedcap(&["partition", "--config", path(&quick_config()), "--out", path(&out_file)]);
    assert!(out.status.success());
    let clients: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(out_file).unwrap()).unwrap();
    assert_eq!(clients.len(), 6);
    for c in &clients {
        assert_eq!(c["indices"].as_array().unwrap().len(), 40);
        let hist: u64 = c["class_histogram"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
        assert_eq!(hist, 40);
    }
}

#[test]
fn cluster_demo_writes_membership_csv() {
    let dir = tempfile::tempdir().unwrap();
    let points = dir.path().join("points.txt");
    let mut text = String::new();
    for i in 0..6 {
        let x = if i < 3 { 0.0 } else { 10.0 };
        text.push_str(&format!("{} {}\n", x + i as f64 * 0.01, x));
    }
    std::fs::write(&points, text).unwrap();
    let out_file = dir.path().join("phi.csv");
    let out = fedcap(&[
        "cluster-demo", "--points", path(&points), "--c", "2", "--gamma", "1", "--out", path(&out_file),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows: Vec<String> = std::fs::read_to_string(&out_file).unwrap().lines().map(String::from).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows[0] == rows[1] && rows[1] == rows[2]);
    assert!(rows[3] == rows[4] && rows[4] == rows[5]);
    assert_ne!(rows[0], rows[3]);

    std::fs::write(&points, "1 2\n3\n").unwrap();
    let out = fedcap(&[
        "cluster-demo", "--points", path(&points), "--c", "1", "--gamma", "1", "--out", path(&out_file),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ablation_commands_report_every_arm() {
    let out = fedcap(&["ablate-clusters", "--config", path(&quick_config()), "--cs", "1,3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["arms"].as_array().unwrap().len(), 2);

    let out = fedcap(&["ablate-dfd", "--config", path(&quick_config()), "--alphas", "0,0.5"]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let arms = report["arms"].as_array().unwrap();
    assert_eq!(arms.len(), 3);
    assert_eq!(arms[1]["cluster_count"], 8);

    assert_eq!(fedcap(&["ablate-clusters", "--config", path(&quick_config()), "--cs", "7"]).status.code(), Some(1));
}

#[test]
fn compare_runs_each_arm_over_seeds() {
    let out = fedcap(&["compare", "--config", path(&quick_config()), "--arms", "fedavg", "--seeds", "2"]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["arms"][0]["seeds"], serde_json::json!([3, 4]));
    assert_eq!(fedcap(&["compare", "--config", path(&quick_config()), "--arms", "sgd"]).status.code(), Some(1));
}
