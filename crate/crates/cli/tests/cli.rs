use std::path::Path;
use std::process::{Command, Output};

use nalgebra::{DMatrix, DVector};
use rsi_core::data::collect;
use rsi_core::model::{pendulum, DisturbanceModel};
use serde_json::{json, Value};

fn rsi(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsi")).current_dir(dir).args(args).output().expect("spawn rsi")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn with_preset() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = rsi(dir.path(), &["preset", "pendulum", "--out", "sys.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir
}

fn manifest(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn collect_reports_excitation() {
    let dir = with_preset();
    let o = rsi(dir.path(), &["collect", "--system", "sys.json", "--steps", "107", "--out", "d.csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let pe: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("d.pe.json")).unwrap()).unwrap();
    assert_eq!(pe["pe_satisfied"], true);
    assert_eq!(pe["rank_xu"], 5);
    assert!(dir.path().join("d.manifest.json").exists());

    let o = rsi(dir.path(), &["collect", "--system", "sys.json", "--steps", "2", "--out", "short.csv"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn collect_is_deterministic() {
    let dir = with_preset();
    for out in ["a.csv", "b.csv"] {
        let o = rsi(dir.path(), &["collect", "--system", "sys.json", "--steps", "150", "--out", out, "--seed", "5"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn manifests_hash_identical_reruns() {
    let runs: Vec<Value> = (0..2)
        .map(|_| {
            let dir = with_preset();
            let o = rsi(dir.path(), &["collect", "--system", "sys.json", "--steps", "120", "--out", "d.csv"]);
            assert_eq!(code(&o), 0);
            manifest(&dir.path().join("d.manifest.json"))
        })
        .collect();
    assert_eq!(runs[0]["outputs"], runs[1]["outputs"]);
    assert_eq!(runs[0]["inputs"], runs[1]["inputs"]);
    assert_eq!(runs[0]["seed"], 42);
    let hash = runs[0]["outputs"]["d.csv"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
}

#[test]
fn model_synthesis_certify_and_simulate() {
    let dir = with_preset();
    let o = rsi(dir.path(), &["synth", "--mode", "model", "--system", "sys.json", "--out", "cert.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("cert.trace.csv").exists());
    let cert = manifest(&dir.path().join("cert.json"));
    let kappa = cert["kappa"].as_f64().unwrap();
    assert!(kappa > 0.9 && kappa < 1.0);

    let o = rsi(dir.path(), &["certify", "--system", "sys.json", "--cert", "cert.json", "--out", "rep.json"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert_eq!(manifest(&dir.path().join("rep.json"))["pass"], true);

    let o = rsi(
        dir.path(),
        &["mc-verify", "--system", "sys.json", "--cert", "cert.json", "--traj", "20", "--horizon", "50", "--out", "mc"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("violations: 0, safety_violations: 0, input_violations: 0"), "{}", stdout(&o));
    assert!(dir.path().join("mc/report.json").exists());
    assert!(dir.path().join("mc/trajectories.csv").exists());
    assert!(dir.path().join("mc/manifest.json").exists());
}

#[test]
fn projection_of_diagonal_shape() {
    let dir = tempfile::tempdir().unwrap();
    let cert = json!({
        "Q": [[4.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]],
        "K": [[0.0, 0.0, 0.0, 0.0]],
        "kappa": 0.5,
        "gamma": 0.0,
        "c": 0.0,
        "provenance": {"kind": "model_based"},
        "log_det_q": 4f64.ln(),
        "tolerances": {"feas_tol": 1e-9, "opt_tol": 1e-8, "eps_floor": 1e-9, "q_floor": 1e-9}
    });
    std::fs::write(dir.path().join("q.json"), cert.to_string()).unwrap();
    let o = rsi(dir.path(), &["project", "--cert", "q.json", "--dims", "1,2", "--out", "e.csv", "--points", "64"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("semi-axes: 2.000000, 1.000000"), "{}", stdout(&o));
    let csv = std::fs::read_to_string(dir.path().join("e.csv")).unwrap();
    assert!(csv.starts_with("x1,x2"));

    let o = rsi(dir.path(), &["project", "--cert", "q.json", "--dims", "1,5", "--out", "bad.csv"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn invalid_inputs_exit_three() {
    let dir = with_preset();
    let o = rsi(dir.path(), &["synth", "--mode", "model", "--system", "sys.json", "--kappa-init", "1", "--out", "c.json"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(!stderr(&o).is_empty());

    std::fs::write(dir.path().join("broken.json"), "{ not json").unwrap();
    let o = rsi(dir.path(), &["certify", "--system", "broken.json", "--cert", "broken.json"]);
    assert_eq!(code(&o), 3);

    let o = rsi(dir.path(), &["synth", "--mode", "sideways", "--out", "c.json"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn rank_deficient_data_has_no_certificate() {
    let dir = with_preset();
    let ds = collect(&pendulum::system(), &DVector::zeros(4), &DMatrix::zeros(1, 40), &DisturbanceModel::zero(4)).unwrap();
    std::fs::write(dir.path().join("flat.csv"), ds.to_csv()).unwrap();
    let o = rsi(
        dir.path(),
        &["synth", "--mode", "data", "--dataset", "flat.csv", "--sets", "sys.json", "--max-iter", "4", "--out", "c.json"],
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"), "{}", stderr(&o));
    assert!(!dir.path().join("c.json").exists());
}

#[test]
fn ident_writes_fit_and_trace() {
    let dir = with_preset();
    let o = rsi(dir.path(), &["collect", "--system", "sys.json", "--steps", "150", "--out", "d.csv"]);
    assert_eq!(code(&o), 0);
    let o = rsi(
        dir.path(),
        &["ident", "--dataset", "d.csv", "--trace-entry", "3,3", "--grid", "10:150:10", "--system", "sys.json"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("regressor_rank: 5"));
    let fit = manifest(&dir.path().join("d.ident.json"));
    assert_eq!(fit["A_hat"].as_array().unwrap().len(), 4);
    let trace = std::fs::read_to_string(dir.path().join("d.trace.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("N,value"));
    assert_eq!(trace.lines().count(), 1 + 15);
}

#[test]
fn repro_pendulum_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let o = rsi(dir.path(), &["repro-pendulum", "--out", "out", "--traj", "20", "--horizon", "50"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let out = dir.path().join("out");
    for f in ["report.md", "manifest.json", "cert_model.json", "cert_data.json", "mc_report.json", "ident_trace.csv"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let report = std::fs::read_to_string(out.join("report.md")).unwrap();
    assert!(report.contains("<svg"));
    let m = manifest(&out.join("manifest.json"));
    assert!(m["outputs"].as_object().unwrap().len() >= 10);
}
