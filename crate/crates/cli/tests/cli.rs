// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end runs of the `regforge` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use regforge::vit::{read_container, save_weights, StorageDtype, WeightStore};
use serde_json::Value;

fn regforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regforge"))
        .args(args)
        .env("REGFORGE_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = regforge(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

/// Planted model directory and its exported ground truth.
fn planted(dir: &Path, seed: u64) -> (PathBuf, Value) {
    let p = dir.join("planted");
    ok(&["make-planted", "--seed", &seed.to_string(), "--images", "6", "--out", s(&p)]);
    let truth = read(&p.join("truth.json"));
    assert_eq!(truth["manifest"]["command"], "make-planted");
    (p, truth["result"].clone())
}

fn scan_args(truth: &Value) -> Vec<String> {
    let sc = &truth["scan"];
    vec![
        "--layer".into(),
        sc["outlier_measure_layer"].to_string(),
        "--threshold".into(),
        sc["outlier_threshold"].to_string(),
        "--top-layer".into(),
        sc["top_layer"].to_string(),
        "--top-k".into(),
        sc["top_k"].to_string(),
    ]
}

#[test]
fn self_test_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["self-test", "--out", s(dir.path())]);
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
    let report = read(&dir.path().join("self_test.json"));
    assert!(report["result"].as_array().unwrap().iter().all(|c| c["passed"] == true));
}

#[test]
fn planted_pipeline_moves_the_outlier_to_the_target() {
    let dir = tempfile::tempdir().unwrap();
    let (p, truth) = planted(dir.path(), 5);
    let model = p.join("model.safetensors");
    let images = p.join("images");
    let scan_dir = dir.path().join("scan");
    let mut args = vec!["scan-registers", s(&images), "--model", s(&model), "--out", s(&scan_dir)];
    let extra = scan_args(&truth);
    args.extend(extra.iter().map(String::as_str));
    ok(&args);

    let scan = read(&scan_dir.join("scan.json"));
    let mut found: Vec<(u64, u64)> = scan["result"]["ranked"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| (r["layer"].as_u64().unwrap(), r["neuron"].as_u64().unwrap()))
        .collect();
    found.sort();
    let planted: Vec<(u64, u64)> = truth["truth"]["planted"]
        .as_array()
        .unwrap()
        .iter()
        .map(|n| (n["layer"].as_u64().unwrap(), n["neuron"].as_u64().unwrap()))
        .collect();
    assert_eq!(found, planted);

    // A patch that is not an outlier in the first image; grid is 4 wide, CLS first.
    let first = &truth["images"][0];
    let outliers: Vec<u64> = first["truth"]["outliers"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    let token = (1..=16).find(|t| !outliers.contains(t)).unwrap();
    let target = format!("{},{}", (token - 1) / 4, (token - 1) % 4);
    let image = p.join(first["file"].as_str().unwrap());
    let shift_dir = dir.path().join("shift");
    ok(&[
        "shift", s(&image), "--model", s(&model), "--scan", s(&scan_dir.join("scan.json")),
        "--targets", &target, "--out", s(&shift_dir),
    ]);
    let r = read(&shift_dir.join("shift.json"));
    assert_eq!(r["result"]["target_is_argmax"], true);
    assert_eq!(r["result"]["after"]["positions"], serde_json::json!([token]));
    assert_eq!(r["manifest"]["command"], "shift");
    assert!(shift_dir.join("heatmaps/norms_after.pgm").exists());

    let add_dir = dir.path().join("add");
    ok(&[
        "add-register", s(&images), "--model", s(&model), "--scan", s(&scan_dir.join("scan.json")),
        "--out", s(&add_dir),
    ]);
    let r = read(&add_dir.join("add_register.json"));
    assert_eq!(r["result"]["emptied"], r["result"]["with_outliers_before"]);
}

#[test]
fn plan_replay_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (p, truth) = planted(dir.path(), 8);
    let model = p.join("model.safetensors");
    let image = p.join("images/img_001.ppm");
    let neurons: Vec<String> = truth["truth"]["planted"]
        .as_array()
        .unwrap()
        .iter()
        .map(|n| format!("{}:{}", n["layer"], n["neuron"]))
        .collect();
    let layer = truth["scan"]["outlier_measure_layer"].to_string();
    let threshold = truth["scan"]["outlier_threshold"].to_string();
    let first = dir.path().join("first");
    ok(&[
        "shift", s(&image), "--model", s(&model), "--neurons", &neurons.join(","),
        "--targets", "0,1;2,3", "--layer", &layer, "--threshold", &threshold, "--out", s(&first),
    ]);
    let again = dir.path().join("again");
    ok(&[
        "shift", s(&image), "--model", s(&model), "--plan", s(&first.join("plan.json")),
        "--layer", &layer, "--threshold", &threshold, "--out", s(&again),
    ]);
    let a = read(&first.join("shift.json"));
    let b = read(&again.join("shift.json"));
    assert_eq!(
        serde_json::to_string(&a["result"]).unwrap(),
        serde_json::to_string(&b["result"]).unwrap()
    );
    assert_eq!(b["manifest"]["plan_path"], s(&first.join("plan.json")));
}

fn json_error(out: &Output) -> Value {
    let line = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(line.trim()).unwrap_or_else(|_| panic!("not JSON: {line}"))
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (p, _) = planted(dir.path(), 2);
    let model = p.join("model.safetensors");
    let out_dir = dir.path().join("e");

    let out = regforge(&["--json-errors", "no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json_error(&out)["error"]["kind"], "usage");

    // No layer, threshold or preset to measure outliers with.
    let out = regforge(&["find-outliers", s(&p.join("images")), "--model", s(&model), "--out", s(&out_dir), "--json-errors"]);
    assert_eq!(out.status.code(), Some(2));

    let out = regforge(&[
        "find-outliers", s(&dir.path().join("missing.ppm")), "--model", s(&model),
        "--layer", "1", "--threshold", "1", "--out", s(&out_dir), "--json-errors",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(json_error(&out)["error"]["code"], 3);

    // A NaN weight surfaces as a numeric fault.
    let bytes = std::fs::read(&model).unwrap();
    let mut store = WeightStore::new();
    for (name, t) in read_container(&bytes).unwrap() {
        store.insert(name, t);
    }
    store.get_mut("patch_embed.weight").unwrap().data_mut()[0] = f32::NAN;
    let bad = dir.path().join("bad");
    std::fs::create_dir_all(&bad).unwrap();
    save_weights(&bad.join("model.safetensors"), &store, StorageDtype::F32).unwrap();
    std::fs::copy(p.join("config.json"), bad.join("config.json")).unwrap();
    let out = regforge(&[
        "find-outliers", s(&p.join("images")), "--model", s(&bad.join("model.safetensors")),
        "--layer", "1", "--threshold", "1", "--out", s(&out_dir), "--json-errors",
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json_error(&out)["error"]["kind"], "numeric_fault");
}
