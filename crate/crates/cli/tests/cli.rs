use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn gbpn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gbpn"))
        .args(args)
        .env("GBPN_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn json_ok(args: &[&str]) -> Value {
    let out = gbpn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON document")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_dataset(dir: &Path, kind: &str) -> std::path::PathBuf {
    let data = dir.join(kind);
    let v = json_ok(&[
        "generate", "--kind", kind, "--rows", "8", "--cols", "9", "--seed", "3", "--burn-in", "50", "--out",
        p(&data),
    ]);
    assert_eq!(v["nodes"], 72);
    assert_eq!(v["edges"], 8 * 8 + 7 * 9);
    data
}

#[test]
fn generate_train_eval_inspect_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), "ising+");
    let model = dir.path().join("model.json");
    let history = dir.path().join("history.csv");
    let trained = json_ok(&[
        "train", "--data", p(&data), "--epochs", "5", "--hidden", "8", "--bp-steps", "2", "--out", p(&model),
        "--history", p(&history),
    ]);
    let test_acc = trained["test_acc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&test_acc));
    let csv = std::fs::read_to_string(&history).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5);

    let evaluated = json_ok(&["eval", "--data", p(&data), "--model", p(&model)]);
    assert!((evaluated["test_acc"].as_f64().unwrap() - test_acc).abs() < 1e-12);
    assert!(evaluated["test_by_degree"].as_array().is_some_and(|a| !a.is_empty()));

    let inspected = json_ok(&["inspect", "--model", p(&model)]);
    let h = inspected["log_coupling"].as_array().unwrap();
    assert_eq!(h.len(), 2);
    let h01 = h[0][1].as_f64().unwrap();
    let h10 = h[1][0].as_f64().unwrap();
    assert!((h01 - h10).abs() < 1e-12, "coupling is symmetric");
}

#[test]
fn mini_batch_exp3_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), "mrf-");
    let model = dir.path().join("model.json");
    json_ok(&[
        "train", "--data", p(&data), "--epochs", "2", "--hidden", "8", "--bp-steps", "2", "--batch", "16",
        "--fanout", "2", "--sampling", "exp3", "--out", p(&model),
    ]);
    let trace = dir.path().join("conv.csv");
    let conv = json_ok(&[
        "convergence", "--data", p(&data), "--model", p(&model), "--max-steps", "6", "--out", p(&trace),
    ]);
    assert_eq!(conv["rows"].as_array().unwrap().len(), 7);
    assert_eq!(std::fs::read_to_string(&trace).unwrap().lines().count(), 1 + 7);

    let var = json_ok(&[
        "variance", "--data", p(&data), "--model", p(&model), "--epochs", "3", "--summary-from", "1", "--batch", "32",
    ]);
    let rho = var["mean_rho"].as_f64().unwrap();
    assert!(rho.is_finite() && rho > 0.0);
}

#[test]
fn oracle_check_passes() {
    let v = json_ok(&["oracle-check", "--trials", "5", "--samples", "20000"]);
    assert_eq!(v["pass"], true);
}

#[test]
fn errors_map_to_exit_codes() {
    assert_eq!(gbpn(&["generate", "--kind", "potts", "--out", "x.json"]).status.code(), Some(1));
    assert_eq!(gbpn(&["train", "--data", "/nonexistent/bundle.json", "--out", "m.json"]).status.code(), Some(2));
    assert_eq!(gbpn(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        gbpn(&["generate", "--kind", "ising+", "--rows", "0", "--out", p(&dir.path().join("d.json"))])
            .status
            .code(),
        Some(1)
    );
}
