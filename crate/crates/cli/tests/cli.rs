use std::path::Path;
use std::process::{Command, Output};

use ptqkit::{load_tensor, save_tensor, Tensor};

fn ptqkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ptqkit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn summary(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("summary is json")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unknown_flag_is_a_config_error() {
    let out = ptqkit(&["gps", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[config]"));
}

#[test]
fn help_exits_cleanly() {
    assert_eq!(ptqkit(&["--help"]).status.code(), Some(0));
    assert_eq!(ptqkit(&["quant-sim", "--help"]).status.code(), Some(0));
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ptqkit(&["calib", "--input", p(&dir.path().join("nope.bin")), "--out", p(&dir.path().join("c.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[io]"));
}

#[test]
fn bad_bits_are_rejected() {
    let out = ptqkit(&["quant-sim", "--preset", "outliers", "--bits-a", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[config]"));
}

#[test]
fn lattice_data_survives_16_bit_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let (rows, n, m) = (40, 6, 5);
    let x: Vec<f32> = (0..rows * n).map(|i| if (i * 7) % 3 == 0 { 3.0 } else { 0.0 }).collect();
    let w: Vec<f32> = (0..n * m).map(|i| if (i * 5) % 4 < 2 { 2.0 } else { 0.0 }).collect();
    let xp = dir.path().join("x.bin");
    let wp = dir.path().join("w.bin");
    save_tensor(&Tensor::new(vec![rows, n], x).unwrap(), &xp).unwrap();
    save_tensor(&Tensor::new(vec![n, m], w).unwrap(), &wp).unwrap();
    let s = summary(&ptqkit(&[
        "quant-sim", "--input", p(&xp), "--weights", p(&wp), "--bits-a", "16", "--bits-w", "16",
    ]));
    assert_eq!(s["mse_none"].as_f64(), Some(0.0));
}

#[test]
fn gps_beats_no_scaling_on_outliers() {
    let s = summary(&ptqkit(&["quant-sim", "--preset", "outliers", "--seed", "42", "--scaling", "gps"]));
    let none = s["mse_none"].as_f64().unwrap();
    let gps = s["mse_gps"].as_f64().unwrap();
    assert!(gps < none, "gps {gps} none {none}");
}

#[test]
fn gen_then_gps_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let xp = dir.path().join("x.bin");
    let wp = dir.path().join("w.bin");
    let sp = dir.path().join("s.bin");
    summary(&ptqkit(&["gen", "--preset", "outliers", "--out", p(&xp), "--weights-out", p(&wp)]));
    let s = summary(&ptqkit(&["gps", "--input", p(&xp), "--weights", p(&wp), "--out", p(&sp)]));
    let scaling = load_tensor(&sp).unwrap();
    assert_eq!(scaling.dims(), &[64]);
    assert!(scaling.data().iter().all(|&v| v > 0.0));
    assert_eq!(s["command"], "gps");

    let q = summary(&ptqkit(&[
        "quant-sim", "--input", p(&xp), "--weights", p(&wp), "--scales", p(&sp),
    ]));
    assert!(q["mse_scales"].as_f64().unwrap() < q["mse_none"].as_f64().unwrap());
}

#[test]
fn failed_run_leaves_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("report.csv");
    let json = dir.path().join("missing").join("report.json");
    let out = ptqkit(&[
        "analyze", "--preset", "outliers", "--out", p(&csv), "--json-out", p(&json),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!csv.exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn stwq_plan_lists_every_position() {
    let dir = tempfile::tempdir().unwrap();
    let xp = dir.path().join("x.bin");
    let plan = dir.path().join("plan.json");
    summary(&ptqkit(&["gen", "--preset", "tokens-sinks", "--out", p(&xp)]));
    summary(&ptqkit(&["stwq", "--input", p(&xp), "--out", p(&plan), "--token-mode", "sink-split"]));
    let plans = ptqkit::stwq::load_plans(&plan, Some(32)).unwrap();
    let layer = &plans["layer0"];
    assert!(layer.sink_set.contains(&0));
}

#[test]
fn dgc_select_writes_sorted_indices() {
    let dir = tempfile::tempdir().unwrap();
    let xp = dir.path().join("x.bin");
    let sel = dir.path().join("sel.json");
    summary(&ptqkit(&["gen", "--preset", "duplicates", "--out", p(&xp)]));
    let s = summary(&ptqkit(&["dgc-select", "--features", p(&xp), "--out", p(&sel)]));
    assert_eq!(s["selected"], 50);
    let text = std::fs::read_to_string(&sel).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let idx: Vec<u64> = v["indices"].as_array().unwrap().iter().map(|i| i.as_u64().unwrap()).collect();
    assert!(idx.windows(2).all(|w| w[0] < w[1]));
}
