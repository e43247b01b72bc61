use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const AXIS: &str = "axis:n=300,p=3,t=0@0.5;1@0.3,v=1;2;3;4,margin=0.01,seed=1";

fn rfsq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfsq")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rfsq(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(args: &[&str]) -> Value {
    serde_json::from_str(ok(args).trim()).unwrap()
}

fn code(args: &[&str]) -> i32 {
    rfsq(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_sample_axis_forest_fits_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("f.rfsq");
    let report = json(&["train", "--data", AXIS, "--n", "300", "--k", "3", "--d", "2", "--m", "4", "--min-leaf", "1", "--out", p(&model), "--no-timing"]);
    assert_eq!(report["rmse"], 0.0);
    assert_eq!(report["mae"], 0.0);
    assert_eq!(report["model_kind"], "forest");
    assert_eq!(report["config"]["n"], 300);
    assert_eq!(report["leaf_histogram"]["4"], 4);
    assert_eq!(report["model_bytes"].as_u64().unwrap(), fs::metadata(&model).unwrap().len());
    assert!(report["timing"].is_null());
}

#[test]
fn defaults_are_resolved_and_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("f.rfsq");
    let report = json(&["train", "--data", "friedman1:n=101,seed=3", "--d", "2", "--m", "3", "--out", p(&model)]);
    assert_eq!(report["config"]["n"], 51);
    assert_eq!(report["config"]["k"], 3);
    assert!(report["timing"]["train_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    fs::write(&csv, "a,b,target\n1,2,3\n4,5,6\n").unwrap();
    let out = dir.path().join("o.rfsq");
    // Missing response column and unreadable input are data errors.
    assert_eq!(code(&["train", "--data", p(&csv), "--out", p(&out)]), 2);
    assert_eq!(code(&["train", "--data", p(&dir.path().join("none.csv")), "--out", p(&out)]), 2);
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "a,y\n1,2\nx,3\n").unwrap();
    let err = rfsq(&["train", "--data", p(&bad), "--out", p(&out)]);
    assert_eq!(err.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&err.stderr);
    assert!(msg.contains("row 2") && msg.contains('a'), "{msg}");
    // Usage errors.
    assert_eq!(code(&["train", "--bogus"]), 1);
    assert_eq!(code(&["train", "--data", "gauss:n=3", "--out", p(&out)]), 1);
    assert_eq!(code(&["train", "--data", AXIS, "--n", "5000", "--out", p(&out)]), 1);
    assert_eq!(code(&["squash", "--model", p(&out), "--data", AXIS, "--lambda", "-1", "--out", p(&out)]), 1);
    assert_eq!(code(&["--help"]), 0);
    // Corrupt model files are data errors.
    fs::write(dir.path().join("junk.rfsq"), b"RFSQ but not really").unwrap();
    assert_eq!(code(&["evaluate", "--model", p(&dir.path().join("junk.rfsq")), "--data", AXIS]), 2);
}

#[test]
fn f32_overflow_is_a_numeric_error() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("big.csv");
    fs::write(&csv, "x,y\n0,1e300\n1,1e300\n2,1e300\n").unwrap();
    let out = dir.path().join("o.rfsq");
    assert_eq!(code(&["train", "--data", p(&csv), "--d", "1", "--m", "1", "--min-leaf", "1", "--float", "f32", "--out", p(&out)]), 3);
}

#[test]
fn squash_modes_differ_only_in_mode_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let forest = dir.path().join("f.rfsq");
    ok(&["train", "--data", AXIS, "--d", "2", "--m", "3", "--min-leaf", "1", "--out", p(&forest)]);
    let (a, e) = (dir.path().join("a.rfsq"), dir.path().join("e.rfsq"));
    ok(&["squash", "--model", p(&forest), "--data", AXIS, "--mode", "argmax", "--out", p(&a)]);
    ok(&["squash", "--model", p(&forest), "--data", AXIS, "--mode", "expectation", "--out", p(&e)]);
    let (a, e) = (fs::read(a).unwrap(), fs::read(e).unwrap());
    assert_eq!(a.len(), e.len());
    let body = a.len() - 4;
    let diffs = (0..body).filter(|&i| a[i] != e[i]).count();
    assert_eq!(diffs, 3, "one mode byte per tree");
}

#[test]
fn squash_report_ratio_is_bytes_over_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let forest = dir.path().join("f.rfsq");
    let surrogate = dir.path().join("s.rfsq");
    let data = "friedman1:n=400,seed=2";
    ok(&["train", "--data", data, "--d", "3", "--m", "5", "--out", p(&forest)]);
    let report = json(&["squash", "--model", p(&forest), "--data", data, "--out", p(&surrogate), "--no-timing"]);
    let before = fs::metadata(&forest).unwrap().len() as f64;
    let after = fs::metadata(&surrogate).unwrap().len() as f64;
    assert_eq!(report["bytes_before"].as_f64().unwrap(), before);
    assert_eq!(report["model_bytes"].as_f64().unwrap(), after);
    assert_eq!(report["compression_ratio"].as_f64().unwrap(), after / before);
    assert_eq!(report["convergence"]["trees"], 5);
    // A different dataset is refused.
    let wrong = rfsq(&["squash", "--model", p(&forest), "--data", "friedman1:n=400,seed=3", "--out", p(&surrogate)]);
    assert_eq!(wrong.status.code(), Some(2));
}

#[test]
fn evaluate_matches_a_two_pass_computation() {
    let dir = tempfile::tempdir().unwrap();
    // Hand-written data so the reference does not go through the library.
    let mut text = String::from("u,v,y\n");
    let mut truth = Vec::new();
    for i in 0..200 {
        let (u, v) = ((i % 17) as f64 / 17.0, (i % 11) as f64 / 11.0);
        let y = 3.0 * u - 2.0 * v + if i % 3 == 0 { 0.5 } else { -0.25 };
        text.push_str(&format!("{u},{v},{y}\n"));
        truth.push(y);
    }
    let csv = dir.path().join("d.csv");
    fs::write(&csv, text).unwrap();
    let model = dir.path().join("f.rfsq");
    ok(&["train", "--data", p(&csv), "--d", "3", "--m", "6", "--k", "2", "--out", p(&model)]);
    let report = json(&["evaluate", "--model", p(&model), "--data", p(&csv), "--no-timing"]);
    let preds: Vec<f64> = ok(&["predict", "--model", p(&model), "--data", p(&csv)])
        .lines()
        .skip(1)
        .map(|l| l.parse().unwrap())
        .collect();
    assert_eq!(preds.len(), 200);
    let sq: f64 = preds.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum();
    let rmse = (sq / 200.0).sqrt();
    let mae = preds.iter().zip(&truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / 200.0;
    assert!((report["rmse"].as_f64().unwrap() - rmse).abs() < 1e-12);
    assert!((report["mae"].as_f64().unwrap() - mae).abs() < 1e-12);
    // Predict also accepts files without the response column.
    let features = dir.path().join("x.csv");
    fs::write(&features, "u,v\n0.5,0.5\n0.1,0.9\n").unwrap();
    let out = ok(&["predict", "--model", p(&model), "--data", p(&features)]);
    assert_eq!(out.lines().count(), 3);
    let wide = dir.path().join("w.csv");
    fs::write(&wide, "u,v,w\n0.5,0.5,1\n").unwrap();
    assert_eq!(code(&["predict", "--model", p(&model), "--data", p(&wide)]), 2);
}

/// Size of a forest file from its leaf histogram, per the byte layout.
fn forest_bytes(hist: &serde_json::Map<String, Value>, w: usize) -> u64 {
    let trees: usize = hist
        .iter()
        .map(|(k, n)| {
            let k: usize = k.parse().unwrap();
            n.as_u64().unwrap() as usize * (4 + (k - 1) * (12 + w) + k * (w + 4))
        })
        .sum();
    (20 + 53 + trees) as u64
}

#[test]
fn size_scales_with_tree_count() {
    let dir = tempfile::tempdir().unwrap();
    let data = "friedman1:n=500,seed=4";
    let mut sizes = Vec::new();
    for m in ["10", "20"] {
        for (float, w) in [("f64", 8), ("f32", 4)] {
            let path = dir.path().join(format!("{m}{float}.rfsq"));
            let report = json(&["train", "--data", data, "--d", "4", "--m", m, "--float", float, "--out", p(&path)]);
            let bytes = fs::metadata(&path).unwrap().len();
            assert_eq!(bytes, forest_bytes(report["leaf_histogram"].as_object().unwrap(), w));
            sizes.push(bytes);
        }
    }
    // The first ten trees of the 20-tree forest are the 10-tree forest.
    assert!(sizes[2] > sizes[0] && sizes[3] > sizes[1]);
}

#[test]
fn bench_rows_and_composition() {
    let dir = tempfile::tempdir().unwrap();
    let data = "friedman1:n=600,seed=5";
    let jsonl = dir.path().join("b.jsonl");
    let stdout = ok(&[
        "bench", "--data", data, "--d", "2,3", "--m", "4", "--lambda", "1e-6,0.01", "--mode", "argmax,expectation", "--float", "f64", "--out", p(&jsonl), "--no-timing", "--format", "json",
    ]);
    let rows: Vec<Value> = fs::read_to_string(&jsonl).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2 * 2 * 2 * 2);
    assert_eq!(stdout.lines().count(), rows.len());
    assert!(rows.iter().all(|r| r["error"].is_null()));

    // A one-cell bench equals train + squash + evaluate on the same split.
    let one = dir.path().join("one.jsonl");
    ok(&["bench", "--data", data, "--d", "3", "--m", "4", "--lambda", "0.01", "--mode", "argmax", "--float", "f32", "--split-seed", "9", "--out", p(&one), "--no-timing", "--format", "json"]);
    let cell: Vec<Value> = fs::read_to_string(&one).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(cell.len(), 2);
    let (forest, surrogate) = (dir.path().join("f.rfsq"), dir.path().join("s.rfsq"));
    let split = ["--split-seed", "9", "--test-fraction", "0.2"];
    let train_args = [&["train", "--data", data, "--part", "train", "--d", "3", "--m", "4", "--float", "f32", "--out", p(&forest)][..], &split].concat();
    ok(&train_args);
    let squash_args = [&["squash", "--model", p(&forest), "--data", data, "--part", "train", "--lambda", "0.01", "--mode", "argmax", "--out", p(&surrogate)][..], &split].concat();
    ok(&squash_args);
    for (row, path) in [(&cell[0], &forest), (&cell[1], &surrogate)] {
        let eval_args = [&["evaluate", "--model", p(path), "--data", data, "--part", "test", "--no-timing"][..], &split].concat();
        let report = json(&eval_args);
        assert_eq!(row["rmse"], report["rmse"]);
        assert_eq!(row["mae"], report["mae"]);
        assert_eq!(row["model_bytes"], report["model_bytes"]);
    }
    let ratio = cell[1]["model_bytes"].as_f64().unwrap() / cell[0]["model_bytes"].as_f64().unwrap();
    assert_eq!(cell[1]["compression_ratio"].as_f64().unwrap(), ratio);
}

#[test]
fn bench_text_output_states_a_verdict() {
    let out = ok(&["bench", "--data", "friedman1:n=300,seed=6", "--d", "2", "--m", "3", "--float", "f64", "--mode", "expectation", "--no-timing"]);
    assert!(out.contains("verdict:"), "{out}");
    assert!(out.contains("squashing reduced the model size in"));
}
