//! End-to-end tests of the `ptq` binary on a small fixture.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ptq"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

/// Runs and expects success; returns stdout as JSON.
fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

/// Runs and expects failure; returns the stderr error listing.
fn err(dir: &Path, args: &[&str]) -> Vec<Value> {
    let out = run(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let v: Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    v["errors"].as_array().expect("error list").clone()
}

/// Small fixture (100 samples) plus a 60-sample calibration profile.
fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["fixtures", "--out", "fx", "--dataset-size", "100"]);
    ok(
        dir.path(),
        &["calibrate", "--model", "fx/model.ptqm", "--dataset", "fx/dataset.ptqt", "--calib-samples", "60"],
    );
    dir
}

fn digests(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                files.insert(rel, Sha256::digest(fs::read(&p).unwrap()).to_vec());
            }
        }
    }
    files
}

/// Parses a CSV written by the tool (no quoted fields) into header-keyed rows.
fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    lines
        .map(|l| {
            header
                .iter()
                .zip(l.split(','))
                .map(|(h, v)| (h.to_string(), v.to_string()))
                .collect()
        })
        .collect()
}

const MODEL: &str = "fx/model.ptqm";
const DATA: &str = "fx/dataset.ptqt";

// ── determinism ─────────────────────────────────────────────────────────────

#[test]
fn every_command_is_byte_deterministic() {
    let runs: Vec<PathBuf> = (0..2)
        .map(|_| {
            let dir = setup().keep();
            let d = dir.as_path();
            ok(d, &["quantize", "--model", MODEL, "--profile", "profile.ptqp", "--wl-w", "6", "--wl-a", "6"]);
            ok(d, &["eval", "--model", "quantized.ptqm", "--dataset", DATA, "--out", "eval.json"]);
            ok(d, &["sweep", "--model", MODEL, "--dataset", DATA, "--profile", "profile.ptqp", "--grid", "equal-6-8"]);
            ok(d, &["report", "--sweep", "sweep/sweep.csv"]);
            dir
        })
        .collect();
    let (a, b) = (digests(&runs[0]), digests(&runs[1]));
    assert!(a.len() >= 15, "{a:?}");
    assert_eq!(a, b);
    for r in runs {
        fs::remove_dir_all(r).unwrap();
    }
}

#[test]
fn worker_count_does_not_change_outputs() {
    let dir = setup();
    let d = dir.path();
    for (jobs, out) in [("1", "s1"), ("3", "s3")] {
        ok(d, &["--jobs", jobs, "sweep", "--model", MODEL, "--dataset", DATA, "--profile", "profile.ptqp", "--grid", "equal-6-8", "--out", out]);
    }
    assert_eq!(digests(&d.join("s1")), digests(&d.join("s3")));
}

// ── calibrate ───────────────────────────────────────────────────────────────

#[test]
fn calibrate_rejects_oversized_sample() {
    let dir = setup();
    let errors = err(dir.path(), &["calibrate", "--model", MODEL, "--dataset", DATA, "--calib-samples", "101"]);
    assert_eq!(errors[0]["kind"], "invalid_argument");
}

#[test]
fn calibrate_records_scales_for_every_site() {
    let dir = setup();
    let text = fs::read_to_string(dir.path().join("profile.ptqp")).unwrap();
    let sites = text.lines().filter(|l| l.starts_with("site ")).count();
    let scales = text.lines().filter(|l| l.starts_with("scale ")).count();
    assert!(sites > 0);
    assert_eq!(sites, scales);
}

// ── quantize ────────────────────────────────────────────────────────────────

#[test]
fn qres_adds_one_quant_node_per_add() {
    let dir = setup();
    let d = dir.path();
    let count = |residual: &str| {
        let v = ok(d, &["quantize", "--model", MODEL, "--profile", "profile.ptqp", "--residual", residual, "--out", "q.ptqm"]);
        v["quant_nodes"].as_u64().unwrap()
    };
    let manifest = fs::read_to_string(d.join(MODEL)).unwrap();
    let adds = manifest.lines().filter(|l| l.contains(" kind=add")).count() as u64;
    assert_eq!(adds, 2);
    assert_eq!(count("qres") - count("fpres"), adds);
}

#[test]
fn quantizing_twice_is_rejected() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["quantize", "--model", MODEL, "--profile", "profile.ptqp"]);
    let errors = err(d, &["quantize", "--model", "quantized.ptqm", "--profile", "profile.ptqp"]);
    assert!(errors[0]["message"].as_str().unwrap().contains("already quantized"));
}

#[test]
fn incompatible_method_is_rejected() {
    let dir = setup();
    let errors = err(dir.path(), &["quantize", "--model", MODEL, "--profile", "profile.ptqp", "--wsm", "batchquant"]);
    assert_eq!(errors[0]["kind"], "incompatible");
}

// ── eval ────────────────────────────────────────────────────────────────────

#[test]
fn float_model_scores_perfectly_against_its_own_labels() {
    let dir = setup();
    let rec = ok(dir.path(), &["eval", "--model", MODEL, "--dataset", DATA]);
    assert_eq!(rec["top1"], 1.0);
    assert_eq!(rec["agreement_with_float"], 1.0);
    assert_eq!(rec["weight_mse_mean"], 0.0);
    assert_eq!(rec["activation_mse_mean"], 0.0);
}

#[test]
fn quantized_record_is_populated_and_finite() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["quantize", "--model", MODEL, "--profile", "profile.ptqp"]);
    let rec = ok(d, &["eval", "--model", "quantized.ptqm", "--dataset", DATA]);
    for key in ["top1", "agreement_with_float", "weight_mse_mean", "activation_mse_mean", "footprint_bytes", "energy_joules"] {
        let v = rec[key].as_f64().unwrap_or_else(|| panic!("{key} missing"));
        assert!(v.is_finite(), "{key} = {v}");
    }
    assert!(rec["top1"].as_f64().unwrap() > 0.9);
    assert!(!rec["weight_mse"].as_object().unwrap().is_empty());
    assert!(!rec["activation_mse"].as_object().unwrap().is_empty());
    assert!(rec["macs"].as_u64().unwrap() > 0);
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = setup();
    let d = dir.path();
    fs::write(d.join("run.cfg"), "# plan\nwl_w = 4\nwl-a = 4\nresidual = qres\n").unwrap();
    let rec = ok(d, &["--config", "run.cfg", "eval", "--model", MODEL, "--dataset", DATA, "--profile", "profile.ptqp", "--wl-a", "7"]);
    let plan = &rec["plan"];
    assert_eq!(plan["wl_w"], 4);
    assert_eq!(plan["wl_a"], 7);
    assert_eq!(plan["residual"], "QRes");

    fs::write(d.join("bad.cfg"), "no-such-flag = 1\n").unwrap();
    let errors = err(d, &["--config", "bad.cfg", "eval", "--model", MODEL, "--dataset", DATA]);
    assert_eq!(errors[0]["kind"], "usage");
}

// ── sweep and report ────────────────────────────────────────────────────────

#[test]
fn sweep_row_matches_single_eval() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["sweep", "--model", MODEL, "--dataset", DATA, "--profile", "profile.ptqp", "--grid", "equal-6-8"]);
    let rows = read_csv(&d.join("sweep/sweep.csv"));
    assert_eq!(rows.len(), 48);
    let rec = ok(
        d,
        &["eval", "--model", MODEL, "--dataset", DATA, "--profile", "profile.ptqp", "--wl-w", "7", "--wl-a", "7", "--wsm", "absmax", "--weight-group", "layer", "--residual", "qres"],
    );
    let row = rows
        .iter()
        .find(|r| r["wl_w"] == "7" && r["wsm"] == "absmax" && r["asm"] == "absp" && r["weight_group"] == "layer" && r["residual"] == "qres")
        .expect("plan is in the grid");
    let num = |k: &str| row[k].parse::<f64>().unwrap();
    assert_eq!(num("top1"), rec["top1"].as_f64().unwrap());
    assert_eq!(num("agreement"), rec["agreement_with_float"].as_f64().unwrap());
    assert_eq!(num("weight_mse"), rec["weight_mse_mean"].as_f64().unwrap());
    assert_eq!(num("activation_mse"), rec["activation_mse_mean"].as_f64().unwrap());
    assert_eq!(num("footprint_bytes"), rec["footprint_bytes"].as_f64().unwrap());
    assert_eq!(num("energy_joules"), rec["energy_joules"].as_f64().unwrap());
}

#[test]
fn report_groups_sum_to_zero_and_histograms_cover_every_row() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["sweep", "--model", MODEL, "--dataset", DATA, "--profile", "profile.ptqp", "--grid", "equal-6-8"]);
    let report = ok(d, &["report", "--sweep", "sweep/sweep.csv"]);
    assert_eq!(report["rows"], 48);
    assert!(!report["pareto_footprint"].as_array().unwrap().is_empty());
    assert!(!report["pareto_energy"].as_array().unwrap().is_empty());

    let mut sums: BTreeMap<(String, String), f64> = BTreeMap::new();
    let diffs = read_csv(&d.join("report/acc_diff.csv"));
    for r in &diffs {
        *sums.entry((r["wl_w"].clone(), r["wl_a"].clone())).or_default() += r["acc_diff"].parse::<f64>().unwrap();
    }
    assert_eq!(sums.len(), 3);
    assert!(sums.values().all(|s| s.abs() < 1e-9), "{sums:?}");

    let mut per_criterion: BTreeMap<String, usize> = BTreeMap::new();
    for r in read_csv(&d.join("report/acc_diff_hist.csv")) {
        *per_criterion.entry(r["criterion"].clone()).or_default() += r["count"].parse::<usize>().unwrap();
    }
    assert_eq!(per_criterion.len(), 4);
    assert!(per_criterion.values().all(|&n| n == diffs.len()), "{per_criterion:?}");
}

#[test]
fn failed_sweep_rows_are_listed_and_the_run_continues() {
    let dir = setup();
    let d = dir.path();
    // The profile only holds the 99.99th percentile, so AbsP at 99.9 cannot resolve.
    let errors = err(
        d,
        &["sweep", "--model", MODEL, "--dataset", DATA, "--profile", "profile.ptqp", "--grid", "equal-6-8", "--percentile-k", "99.9"],
    );
    assert!(!errors.is_empty());
    assert!(errors.iter().all(|e| e["kind"] == "sweep_row"));
    let rows = read_csv(&d.join("sweep/sweep.csv"));
    assert_eq!(rows.len(), 48);
    let ok_rows = rows.iter().filter(|r| r["error"].is_empty()).count();
    assert_eq!(ok_rows + errors.len(), 48);
    assert!(ok_rows > 0);
}

#[test]
fn report_on_missing_sweep_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let errors = err(dir.path(), &["report", "--sweep", "nope.csv"]);
    assert_eq!(errors[0]["kind"], "csv");
}
