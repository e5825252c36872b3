//! End-to-end tests of the `evseg` binary.

use std::path::Path;
use std::process::{Command, Output};

fn evseg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evseg"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn synth_sequence(dir: &Path, name: &str, seed: u64) {
    let out = evseg(
        &[
            "synth",
            "--out",
            name,
            "--seed",
            &seed.to_string(),
            "--objects",
            "1",
            "--duration-ms",
            "80",
        ],
        dir,
    );
    assert_success(&out);
}

#[test]
fn eval_of_identical_labels_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    synth_sequence(tmp.path(), "seq", 5);
    let out = evseg(
        &[
            "eval",
            "--pred",
            "seq/labels.txt",
            "--gt",
            "seq/labels.txt",
            "--events",
            "seq/events.txt",
            "--window-ms",
            "20",
        ],
        tmp.path(),
    );
    assert_success(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let summary = stdout.lines().last().unwrap();
    assert!(summary.contains("f1=1.0000"), "summary: {summary}");
    assert!(summary.contains("iou_mean=1.0000"), "summary: {summary}");
    assert!(summary.contains("dr=1.0000"), "summary: {summary}");
}

#[test]
fn missing_input_exits_with_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = evseg(
        &[
            "eval",
            "--pred",
            "nope.labels",
            "--gt",
            "nope.labels",
            "--events",
            "missing.txt",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("missing.txt") || stderr.contains("nope.labels"), "{stderr}");
}

#[test]
fn unknown_flag_exits_with_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = evseg(&["synth", "--out", "x", "--bogus-flag"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_is_reproducible_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    synth_sequence(tmp.path(), "a", 9);
    synth_sequence(tmp.path(), "b", 9);
    for file in ["events.txt", "labels.txt", "meta.txt"] {
        let a = std::fs::read(tmp.path().join("a").join(file)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn graph_command_writes_edge_lists() {
    let tmp = tempfile::tempdir().unwrap();
    synth_sequence(tmp.path(), "seq", 3);
    let out = evseg(
        &[
            "graph",
            "--in",
            "seq/events.txt",
            "--out",
            "graphs",
            "--window-ms",
            "20",
            "--k",
            "4",
            "--nmax",
            "500",
        ],
        tmp.path(),
    );
    assert_success(&out);
    let files: Vec<_> = std::fs::read_dir(tmp.path().join("graphs")).unwrap().collect();
    assert!(!files.is_empty());
    let first = std::fs::read_to_string(
        tmp.path().join("graphs").join("window_000000.edges"),
    )
    .unwrap();
    let fields: Vec<&str> = first.lines().next().unwrap().split(' ').collect();
    assert_eq!(fields.len(), 3, "edge line `i j distance`");
}

#[test]
fn train_predict_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    synth_sequence(tmp.path(), "data/s1", 11);
    synth_sequence(tmp.path(), "data/s2", 12);
    let out = evseg(
        &[
            "train",
            "--data",
            "data",
            "--ckpt",
            "model.gtnn",
            "--dims",
            "4,8,8",
            "--k",
            "4",
            "--epochs",
            "2",
            "--subsets",
            "1",
            "--window-ms",
            "20",
            "--nmax",
            "512",
            "--min-events",
            "60",
            "--history",
            "hist.csv",
        ],
        tmp.path(),
    );
    assert_success(&out);
    assert!(tmp.path().join("model.gtnn").exists());
    assert!(tmp.path().join("model.config").exists());
    let hist = std::fs::read_to_string(tmp.path().join("hist.csv")).unwrap();
    assert!(hist.starts_with("epoch,subset,loss,seconds"));
    assert_eq!(hist.lines().count(), 3, "header + 2 epochs");

    let out = evseg(
        &[
            "predict",
            "--ckpt",
            "model.gtnn",
            "--in",
            "data/s1/events.txt",
            "--out",
            "pred.labels",
            "--window-ms",
            "20",
            "--nmax",
            "512",
            "--min-events",
            "60",
        ],
        tmp.path(),
    );
    assert_success(&out);
    let pred_lines = std::fs::read_to_string(tmp.path().join("pred.labels"))
        .unwrap()
        .lines()
        .count();
    let event_lines = std::fs::read_to_string(tmp.path().join("data/s1/events.txt"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(pred_lines, event_lines, "one label per event");

    let out = evseg(
        &[
            "eval",
            "--pred",
            "pred.labels",
            "--gt",
            "data/s1/labels.txt",
            "--events",
            "data/s1/events.txt",
            "--window-ms",
            "20",
            "--report",
            "report.csv",
        ],
        tmp.path(),
    );
    assert_success(&out);
    let report = std::fs::read_to_string(tmp.path().join("report.csv")).unwrap();
    assert!(report.starts_with("window_id,iou,dr_success,tp,fp,tn,fn"));
    assert!(report.lines().last().unwrap().starts_with("summary,"));
}

#[test]
fn label_command_reconstructs_synthetic_labels() {
    let tmp = tempfile::tempdir().unwrap();
    synth_sequence(tmp.path(), "seq", 21);
    let out = evseg(
        &[
            "label",
            "--events",
            "seq/events.txt",
            "--frames",
            "seq/frames",
            "--masks",
            "seq/masks",
            "--out",
            "domel.labels",
            "--low",
            "15",
            "--high",
            "40",
        ],
        tmp.path(),
    );
    assert_success(&out);
    let labels = std::fs::read_to_string(tmp.path().join("domel.labels")).unwrap();
    assert_eq!(
        labels.lines().count(),
        std::fs::read_to_string(tmp.path().join("seq/events.txt"))
            .unwrap()
            .lines()
            .count()
    );
    // Most labels agree with the generator's ground truth.
    let truth = std::fs::read_to_string(tmp.path().join("seq/labels.txt")).unwrap();
    let agree = labels
        .lines()
        .zip(truth.lines())
        .filter(|(a, b)| a.split(' ').next() == b.split(' ').next())
        .count();
    let total = truth.lines().count();
    assert!(
        agree as f64 >= 0.9 * total as f64,
        "only {agree}/{total} labels agree with the generator"
    );
}

#[test]
fn thread_cap_flag_is_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    let out = evseg(
        &["--threads", "1", "synth", "--out", "seq", "--seed", "1", "--duration-ms", "40"],
        tmp.path(),
    );
    assert_success(&out);
}
