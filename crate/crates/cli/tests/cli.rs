use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hiergraph::pipeline::RunConfig;

const SMALL: &str = r#"
[model]
d_h = 6
d_e = 3
layers = 1
window = 6
horizon = 2

[hierarchy]
cluster_sizes = [2, 1]

[train]
batch_size = 8
batches_per_epoch = 3
max_epochs = 3
"#;

fn hg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hiergraph"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, clusters: usize) {
    let out = hg(&[
        "synth",
        "--out",
        p(dir),
        "--seed",
        "4",
        "--set",
        "synth.length=240",
        "--set",
        "synth.nodes_per_cluster=3",
        "--set",
        &format!("synth.n_clusters={clusters}"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

/// Synthetic data plus one small training run in `root/run`.
fn trained(root: &Path) {
    synth(&root.join("data"), 2);
    fs::write(root.join("small.toml"), SMALL).unwrap();
    let out = hg(&[
        "train",
        "--config",
        p(&root.join("small.toml")),
        "--data",
        p(&root.join("data")),
        "--out",
        p(&root.join("run")),
        "--seed",
        "7",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_writes_artifacts_and_is_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    synth(&root.join("data"), 2);
    fs::write(root.join("small.toml"), SMALL).unwrap();
    for run in ["a", "b"] {
        let out = hg(&[
            "train",
            "--config",
            p(&root.join("small.toml")),
            "--data",
            p(&root.join("data")),
            "--out",
            p(&root.join(run)),
            "--seed",
            "3",
            "--set",
            "train.lr=0.002",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["log.jsonl", "clusters.txt", "metrics.json"] {
        let a = fs::read(root.join("a").join(file)).unwrap();
        let b = fs::read(root.join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
    // Checkpoints differ only in the recorded output directory.
    let ck = |run: &str| -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(root.join(run).join("checkpoint.json")).unwrap()).unwrap()
    };
    let (a, b) = (ck("a"), ck("b"));
    for key in ["model", "selector", "adam_model", "adam_selector", "standardizer", "best_epoch"] {
        assert_eq!(a[key], b[key], "checkpoint field {key} differs");
    }
    let cfg = RunConfig::load(&root.join("a/config.toml")).unwrap();
    assert_eq!(cfg.train.lr, 0.002);
    assert_eq!(cfg.train.seed, 3);
    assert_eq!(cfg.hierarchy.cluster_sizes, vec![2, 1]);

    let log = fs::read_to_string(root.join("a/log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["lr"], 0.002);
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("a/metrics.json")).unwrap()).unwrap();
    assert!(metrics["model"]["mae"].as_f64().unwrap() > 0.0);
    assert!(metrics["persistence"]["mae"].as_f64().unwrap() > 0.0);
}

#[test]
fn error_exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let missing = root.path().join("nowhere");
    let out = hg(&["train", "--data", p(&missing), "--out", p(&root.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = hg(&["train", "--set", "train.no_such_key=1"]);
    assert_eq!(out.status.code(), Some(1));
    let out = hg(&["train", "--set", "train.lr=-1"]);
    assert_eq!(out.status.code(), Some(1));
    let out = hg(&["--bogus-flag"]);
    assert_eq!(out.status.code(), Some(1));
    let out = hg(&["eval", "--checkpoint", p(&missing)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_is_deterministic_and_checks_dimensions() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    trained(root);
    let ck = root.join("run/checkpoint.json");
    let a = hg(&["eval", "--checkpoint", p(&ck), "--split", "val"]);
    let b = hg(&["eval", "--checkpoint", p(&ck), "--split", "val"]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let report: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(report["split"], "val");
    assert_eq!(report["model"]["per_level_mae"].as_array().unwrap().len(), 3);
    assert!(root.join("run/eval_val.json").exists());

    synth(&root.join("wide"), 3);
    let out = hg(&["eval", "--checkpoint", p(&ck), "--data", p(&root.join("wide"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nodes"));
}

#[test]
fn clusters_export() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    trained(root);
    let out = hg(&["clusters", "--checkpoint", p(&root.join("run/checkpoint.json"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(root.join("run/clusters.txt")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0].split_whitespace().count(), 6);
    assert_eq!(lines[1].split_whitespace().count(), 2);

    let csv = fs::read_to_string(root.join("run/cluster_profiles.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    // Two level-1 clusters and the total, four statistics each.
    assert_eq!(header.len(), 1 + 3 * 4);
    assert_eq!(header[1], "L1C0_sum");
    assert_eq!(csv.lines().count(), 1 + 240);
}

#[test]
fn reconcile_removes_incoherence() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    fs::write(root.join("f.csv"), "16\n6\n9\n1\n2\n3\n4\n5\n").unwrap();
    fs::write(root.join("h.txt"), "0:0 1:0 2:0 3:1 4:1\n0:0 1:0\n").unwrap();
    let out = hg(&[
        "reconcile",
        "--forecast",
        p(&root.join("f.csv")),
        "--hierarchy",
        p(&root.join("h.txt")),
        "--out",
        p(root),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((report["residual_before"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(report["residual_after"].as_f64().unwrap() < 1e-9);
    let rows: Vec<f64> = fs::read_to_string(root.join("reconciled.csv"))
        .unwrap()
        .lines()
        .map(|l| l.parse().unwrap())
        .collect();
    assert_eq!(rows.len(), 8);
    assert!((rows[0] - rows[1] - rows[2]).abs() < 1e-9);
    assert!((rows[1] - rows[3] - rows[4] - rows[5]).abs() < 1e-9);

    fs::write(root.join("short.csv"), "1\n2\n").unwrap();
    let out = hg(&["reconcile", "--forecast", p(&root.join("short.csv")), "--hierarchy", p(&root.join("h.txt"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dumped_defaults_parse_back() {
    let out = hg(&["--dump-defaults"]);
    assert!(out.status.success());
    let cfg = RunConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg, RunConfig::default());
}
