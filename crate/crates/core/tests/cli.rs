//! End-to-end tests of the command-line workflow: run both modes on the same
//! suite, compare verdicts, exercise report files and exit codes.

mod common;

use std::path::PathBuf;
use std::process::Command;

use batchverify::cli::{
    load_inputs, read_report, run, summarize, ClassSelection, RunConfig, RunMode,
};
use batchverify::driver::{RobustnessStatus, SplitStrategy};

fn fixture(dir: &tempfile::TempDir, seed: u64, count: usize) -> (PathBuf, PathBuf) {
    let net = common::random_net_json(seed, &[3, 5, 2], 1.2);
    let net_path = dir.path().join("net.json");
    std::fs::write(&net_path, net.to_string()).unwrap();
    let inputs = common::random_inputs(seed, count, 3);
    let csv_path = dir.path().join("inputs.csv");
    std::fs::write(&csv_path, common::rows_to_csv(&inputs)).unwrap();
    (net_path, csv_path)
}

fn base_config(net: PathBuf, inputs: PathBuf, epsilon: f64, mode: RunMode) -> RunConfig {
    RunConfig {
        network: net,
        inputs,
        class: ClassSelection::Auto,
        epsilon,
        max_batch_size: 4,
        bucket_size: 2,
        rho: 1.0,
        seed: 42,
        split_layer: SplitStrategy::Auto,
        mode,
        report: None,
        feas_tol: 1e-6,
        int_tol: 1e-6,
        obj_tol: 1e-6,
        node_limit: 2_000_000,
        threads: Some(1),
    }
}

#[test]
fn both_modes_agree_and_reports_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (net, inputs) = fixture(&dir, 9, 14);

    let mut batch_cfg = base_config(net.clone(), inputs.clone(), 0.05, RunMode::Batch);
    batch_cfg.report = Some(dir.path().join("batch.json"));
    let batch = run(&batch_cfg).unwrap();
    assert!(batch.incomplete.is_none());

    let mut base_cfg = base_config(net, inputs, 0.05, RunMode::OneByOne);
    base_cfg.report = Some(dir.path().join("base.json"));
    let baseline = run(&base_cfg).unwrap();

    assert_eq!(batch.per_input.len(), 14);
    assert_eq!(baseline.per_input.len(), 14);
    for (b, o) in batch.per_input.iter().zip(&baseline.per_input) {
        assert_eq!(b.input, o.input);
        assert_eq!(b.status, o.status, "input {}", b.input);
    }

    // Reports round-trip through disk and summarize accepts them.
    let batch_back = read_report(&dir.path().join("batch.json")).unwrap();
    let base_back = read_report(&dir.path().join("base.json")).unwrap();
    assert_eq!(batch_back.per_input.len(), batch.per_input.len());
    let table = summarize(&batch_back, Some(&base_back));
    assert!(table.contains("speedup vs baseline"), "{}", table);
    assert!(table.contains("class"), "{}", table);
}

#[test]
fn zero_epsilon_certifies_every_correctly_classified_input() {
    let dir = tempfile::tempdir().unwrap();
    let (net, inputs) = fixture(&dir, 21, 10);
    let cfg = base_config(net, inputs, 0.0, RunMode::Batch);
    let report = run(&cfg).unwrap();
    // Auto mode verifies each input against its own predicted class, so
    // every ball is a correctly classified point and must be robust.
    assert!(report
        .per_input
        .iter()
        .all(|v| v.status == RobustnessStatus::Robust));
    for c in &report.classes {
        assert_eq!(c.robust, c.correctly_classified);
        assert_eq!(c.correctly_classified, c.total);
    }
}

#[test]
fn missing_and_malformed_inputs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (net, _) = fixture(&dir, 33, 4);

    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let cfg = base_config(net.clone(), empty, 0.05, RunMode::Batch);
    assert!(matches!(run(&cfg), Err(batchverify::Error::InvalidInput(_))));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "0.5,0.5,0.5\n0.5,2.5,0.5\n").unwrap();
    let err = load_inputs(&bad, 3).unwrap_err().to_string();
    assert!(err.contains("line 2"), "{}", err);
}

#[test]
fn fixed_class_filters_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let (net, inputs) = fixture(&dir, 44, 12);
    let mut cfg = base_config(net, inputs, 0.02, RunMode::Batch);
    cfg.class = ClassSelection::Fixed(0);
    let report = run(&cfg).unwrap();
    let summary = &report.classes[0];
    assert_eq!(summary.class, 0);
    let misclassified = report
        .per_input
        .iter()
        .filter(|v| v.status == RobustnessStatus::NonRobustMisclassified)
        .count();
    assert_eq!(summary.total - summary.correctly_classified, misclassified);
}

#[test]
fn binary_exit_codes_and_summarize() {
    let dir = tempfile::tempdir().unwrap();
    let (net, inputs) = fixture(&dir, 55, 8);
    let report_path = dir.path().join("report.json");
    let bin = env!("CARGO_BIN_EXE_batchverify");

    // Usage error: unknown mode.
    let out = Command::new(bin)
        .args([
            "run",
            "--network",
            net.to_str().unwrap(),
            "--inputs",
            inputs.to_str().unwrap(),
            "--epsilon",
            "0.01",
            "--mode",
            "sideways",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());

    // Successful run writes the report and prints a table.
    let out = Command::new(bin)
        .args([
            "run",
            "--network",
            net.to_str().unwrap(),
            "--inputs",
            inputs.to_str().unwrap(),
            "--epsilon",
            "0.01",
            "--seed",
            "7",
            "--report",
            report_path.to_str().unwrap(),
        ])
        .env("BATCHVERIFY_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(report_path.exists());
    assert!(String::from_utf8_lossy(&out.stdout).contains("cert.rate"));

    // Summarize the self-produced report.
    let out = Command::new(bin)
        .args(["summarize", report_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("total"));

    // Missing file is a usage error.
    let out = Command::new(bin)
        .args(["summarize", dir.path().join("nope.json").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn identical_seed_reproduces_verdict_section() {
    let dir = tempfile::tempdir().unwrap();
    let (net, inputs) = fixture(&dir, 66, 10);
    let cfg = base_config(net, inputs, 0.03, RunMode::Batch);
    let a = run(&cfg).unwrap();
    let b = run(&cfg).unwrap();
    let ja = serde_json::to_string(&a.per_input).unwrap();
    let jb = serde_json::to_string(&b.per_input).unwrap();
    assert_eq!(ja, jb);
}
