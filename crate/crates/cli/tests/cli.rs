use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use dse_core::estimator::{estimate, SolverConfig};
use dse_core::models::{build_model, FaultHypothesis, LoadTopology};
use dse_core::waveform::{load_waveform_csv, window};
use serde_json::Value;
use tempfile::TempDir;

fn dse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dse")).args(args).output().expect("spawn dse")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout_json(out: &Output) -> Value {
    assert_eq!(code(out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Simulated records shared by the tests: wye lg-a, wye ll-bc, wye unfaulted.
struct Fixture {
    _dir: TempDir,
    wye_lg_a: PathBuf,
    wye_ll_bc: PathBuf,
    wye_unfaulted: PathBuf,
}

fn simulate_into(dir: &Path, name: &str, scenario: &str) -> PathBuf {
    let sc = dir.join(format!("{name}.json"));
    fs::write(&sc, scenario).unwrap();
    let wf = dir.join(format!("{name}.csv"));
    let truth = dir.join(format!("{name}_truth.csv"));
    let out = dse(&["simulate", s(&sc), "--waveform", s(&wf), "--truth", s(&truth)]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    wf
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let base = r#""topology": "wye", "r_load": 7.373, "l_load": 0.009779"#;
        let wye_lg_a = simulate_into(dir.path(), "lg_a", &format!(r#"{{{base}, "hypothesis": "lg-a", "r_fault": 0.015}}"#));
        let wye_ll_bc = simulate_into(dir.path(), "ll_bc", &format!(r#"{{{base}, "hypothesis": "ll-bc", "r_fault": 0.01}}"#));
        let wye_unfaulted = simulate_into(dir.path(), "unfaulted", &format!("{{{base}}}"));
        Fixture { _dir: dir, wye_lg_a, wye_ll_bc, wye_unfaulted }
    })
}

#[test]
fn estimate_recovers_fault_resistance() {
    let f = fixture();
    let out = dse(&["estimate", s(&f.wye_lg_a), "--topology", "wye", "--hypothesis", "lg-a", "--window", "0.3:0.5"]);
    let v = stdout_json(&out);
    let rf = v["rf_hat_ohm"].as_f64().unwrap();
    assert!((rf / 0.015 - 1.0).abs() <= 0.02, "rf {rf}");
    assert!((v["r_hat_ohm"].as_f64().unwrap() / 7.373 - 1.0).abs() <= 0.01);
    assert!((v["l_hat_h"].as_f64().unwrap() / 9.779e-3 - 1.0).abs() <= 0.01);
    assert_eq!(v["converged"], Value::Bool(true));
    assert!(v["iterations"].as_u64().unwrap() >= 1);
    assert!(v["cost"].is_f64());
}

#[test]
fn estimate_window_restricts_samples() {
    let f = fixture();
    let v = stdout_json(&dse(&[
        "estimate", s(&f.wye_unfaulted), "--topology", "wye", "--hypothesis", "unfaulted", "--window", "0.3:0.4",
    ]));
    // 0.1 s at the default 1e-4 s output period, both ends included.
    assert_eq!(v["samples"].as_u64(), Some(1001));
    assert!((v["t_start"].as_f64().unwrap() - 0.3).abs() < 1e-9);
    assert!((v["t_end"].as_f64().unwrap() - 0.4).abs() < 1e-9);
}

#[test]
fn estimate_json_round_trips_full_precision() {
    let f = fixture();
    let out = dse(&["estimate", s(&f.wye_unfaulted), "--topology", "wye", "--hypothesis", "unfaulted", "--window", "0.3:0.35"]);
    let v = stdout_json(&out);

    let ws = load_waveform_csv(fs::File::open(&f.wye_unfaulted).unwrap()).unwrap();
    let ws = window(&ws, 0.3, 0.35).unwrap();
    let model = build_model(LoadTopology::GroundedWyeRL, FaultHypothesis::Unfaulted, ws.n(), ws.dt()).unwrap();
    let r = estimate(&model, &ws, &SolverConfig::default()).unwrap();
    for (key, want) in [("r_hat_ohm", r.params.r), ("l_hat_h", r.params.l), ("cost", r.cost), ("t_start", ws.t0())] {
        assert_eq!(v[key].as_f64().unwrap().to_bits(), want.to_bits(), "{key}");
    }
    assert_eq!(v["iterations"].as_u64(), Some(r.iterations as u64));
}

#[test]
fn hypothesis_invalid_for_topology_is_usage_error() {
    let f = fixture();
    let out = dse(&["estimate", s(&f.wye_unfaulted), "--topology", "1ph", "--hypothesis", "ll-ab"]);
    assert_eq!(code(&out), 2);
    assert!(out.stdout.is_empty());
}

#[test]
fn bad_flags_are_usage_errors() {
    let f = fixture();
    assert_eq!(code(&dse(&["estimate", s(&f.wye_unfaulted), "--topology", "star", "--hypothesis", "lg-a"])), 2);
    assert_eq!(code(&dse(&["estimate", s(&f.wye_unfaulted), "--topology", "wye", "--hypothesis", "lg-a", "--window", "0.3"])), 2);
    assert_eq!(code(&dse(&["estimate", s(&f.wye_unfaulted), "--topology", "wye", "--hypothesis", "lg-a", "--tol", "-1"])), 2);
    assert_eq!(code(&dse(&["frobnicate"])), 2);
}

#[test]
fn classify_line_line_selects_faulted_pair() {
    let f = fixture();
    let v = stdout_json(&dse(&["classify", s(&f.wye_ll_bc), "--topology", "wye", "--window", "0.3:0.5"]));
    assert_eq!(v["selected"], "ll-bc");
    assert_eq!(v["entries"].as_array().unwrap().len(), 7);
    let margin = v["margin"].as_f64().unwrap();
    assert!(margin > 0.0);
    // The neighbouring line-line hypotheses sit within the default 0.5 margin
    // on this record, so the trip gate is checked on both sides of it.
    let expect = if margin >= 0.5 { "trip" } else { "hold" };
    assert_eq!(v["trip_decision"]["action"], expect);
    let gate = format!("{}", margin * 0.5);
    let v = stdout_json(&dse(&["classify", s(&f.wye_ll_bc), "--topology", "wye", "--window", "0.3:0.5", "--margin", &gate]));
    assert_eq!(v["trip_decision"]["action"], "trip");
    let gate = format!("{}", margin * 2.0);
    let v = stdout_json(&dse(&["classify", s(&f.wye_ll_bc), "--topology", "wye", "--window", "0.3:0.5", "--margin", &gate]));
    assert_eq!(v["trip_decision"]["action"], "hold");
}

#[test]
fn classify_unfaulted_holds() {
    let f = fixture();
    let v = stdout_json(&dse(&["classify", s(&f.wye_unfaulted), "--topology", "wye", "--window", "0.3:0.5"]));
    assert_eq!(v["selected"], "unfaulted");
    assert_eq!(v["trip_decision"]["action"], "hold");
}

#[test]
fn short_waveform_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let wf = dir.path().join("short.csv");
    let mut text = String::from("time,va,vb,vc,ia,ib,ic\n");
    for k in 0..4 {
        text += &format!("{},1,2,3,0.1,0.2,0.3\n", k as f64 * 1e-4);
    }
    fs::write(&wf, text).unwrap();
    let out = dse(&["classify", s(&wf), "--topology", "wye"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("size"));
}

#[test]
fn malformed_inputs_are_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let wf = dir.path().join("bad.csv");
    fs::write(&wf, "time,va\n0,1\n").unwrap();
    assert_eq!(code(&dse(&["estimate", s(&wf), "--topology", "1ph", "--hypothesis", "unfaulted"])), 3);
    assert_eq!(code(&dse(&["estimate", "/nonexistent/x.csv", "--topology", "1ph", "--hypothesis", "unfaulted"])), 3);
    let sc = dir.path().join("bad.json");
    fs::write(&sc, "{ not json").unwrap();
    let out = dse(&["simulate", s(&sc), "--waveform", s(&dir.path().join("w.csv")), "--truth", s(&dir.path().join("t.csv"))]);
    assert_eq!(code(&out), 3);
}

#[test]
fn simulate_rejects_fault_after_end() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("late.json");
    fs::write(
        &sc,
        r#"{"topology": "wye", "r_load": 7.373, "l_load": 0.009779, "hypothesis": "lg-a", "r_fault": 0.015,
            "t_fault": 0.6, "t_end": 0.5}"#,
    )
    .unwrap();
    let wf = dir.path().join("w.csv");
    let out = dse(&["simulate", s(&sc), "--waveform", s(&wf), "--truth", s(&dir.path().join("t.csv"))]);
    assert_ne!(code(&out), 0);
    assert!(!wf.exists());
}

#[test]
fn simulate_is_deterministic_and_writes_truth_header() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = r#"{"topology": "1ph", "r_load": 7.373, "l_load": 0.009779, "hypothesis": "lg-a", "r_fault": 0.015,
        "t_fault": 0.05, "t_end": 0.1, "analysis_start": 0.07}"#;
    let a = simulate_into(dir.path(), "a", scenario);
    let b = simulate_into(dir.path(), "b", scenario);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let ta = fs::read(dir.path().join("a_truth.csv")).unwrap();
    assert_eq!(ta, fs::read(dir.path().join("b_truth.csv")).unwrap());
    let header = String::from_utf8(ta).unwrap().lines().next().unwrap().to_string();
    assert!(header.starts_with("time,"), "{header}");
    assert_eq!(String::from_utf8(fs::read(&a).unwrap()).unwrap().lines().next(), Some("time,va,vb,vc,ia,ib,ic"));
}

#[test]
fn report_empty_case_list() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("empty.json");
    fs::write(&cfg, r#"{"cases": []}"#).unwrap();
    let out = dse(&["report", s(&cfg)]);
    assert_eq!(code(&out), 0);
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        "case,R_true,R_hat,L_true,L_hat,Rf_true,Rf_hat,selected,J_best,J_margin,converged\n"
    );
}

#[test]
fn report_is_reproducible_and_records_case_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"cases": [
            {"label": "short 1ph", "scenario": {"topology": "1ph", "r_load": 7.373, "l_load": 0.009779,
              "hypothesis": "lg-a", "r_fault": 0.015, "t_fault": 0.05, "t_end": 0.1, "analysis_start": 0.07}},
            {"label": "broken", "scenario": {"topology": "wye", "r_load": 7.373, "l_load": 0.009779,
              "t_fault": 0.6, "t_end": 0.5}}
        ]}"#,
    )
    .unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for p in [&a, &b] {
        let out = dse(&["report", s(&cfg), "--csv", s(p)]);
        assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    let first: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(first[0], "short 1ph");
    assert_eq!(first[7], "lg-a");
    let rf_hat: f64 = first[6].parse().unwrap();
    assert!(rf_hat > 0.0);
    let broken: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(broken[0], "broken");
    assert_eq!(broken[2], "");
    assert_eq!(broken[10], "false");
}

#[test]
fn report_config_rejects_unknown_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"cases": [], "colour": "red"}"#).unwrap();
    assert_eq!(code(&dse(&["report", s(&cfg)])), 3);
}
