use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn kit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recourse-kit"))
        .args(args)
        .env_remove("RECOURSE_KIT_LOG")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn json_report(args: &[&str]) -> (i32, Value) {
    let mut all = args.to_vec();
    all.extend(["--format", "json"]);
    let out = kit(&all);
    let report = serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("{e}: stdout {:?} stderr {:?}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
    });
    (code(&out), report)
}

const EXAMPLE_GEN: [&str; 15] = [
    "gen",
    "--seed",
    "5",
    "--stages",
    "3",
    "--branching",
    "2,1",
    "--n",
    "1",
    "--m",
    "1",
    "--operator",
    "smooth",
    "--sets",
    "polyhedron",
];

#[test]
fn bundled_fixtures_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let inst = dir.path().join("i.json");
    let solved = dir.path().join("s.json");
    let mut args = EXAMPLE_GEN.to_vec();
    args.extend(["--random-probabilities", "--out", inst.to_str().unwrap()]);
    assert_eq!(code(&kit(&args)), 0);
    assert_eq!(fs::read(&inst).unwrap(), fs::read(data("example_instance.json")).unwrap());

    let out = kit(&["solve", "--instance", inst.to_str().unwrap(), "--save", solved.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(fs::read(&solved).unwrap(), fs::read(data("example_solved.json")).unwrap());
}

#[test]
fn verify_kkt_accepts_the_bundled_certificate() {
    let (c, r) = json_report(&["verify-kkt", "--instance", data("example_solved.json").to_str().unwrap()]);
    assert_eq!(c, 0);
    assert_eq!(r["pass"], true);
    assert!(r["details"]["stationarity"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn tampered_certificate_fails_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut file: Value = serde_json::from_slice(&fs::read(data("example_solved.json")).unwrap()).unwrap();
    let psi = &mut file["certificate"]["psi"][2]["3"][0];
    *psi = Value::from(psi.as_f64().unwrap() + 0.5);
    let path = dir.path().join("bad.json");
    fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
    let (c, r) = json_report(&["verify-kkt", "--instance", path.to_str().unwrap()]);
    assert_eq!(c, 2);
    assert_eq!(r["pass"], false);
}

#[test]
fn check_adjoint_reports_tiny_pairing_error() {
    let (c, r) = json_report(&["check-adjoint", "--instance", data("example_instance.json").to_str().unwrap()]);
    assert_eq!(c, 0);
    assert!(r["details"]["max_error"].as_f64().unwrap() <= 1e-12);
    assert_eq!(r["format_version"], 1);
    assert_eq!(r["seed"], 0);
}

#[test]
fn check_jacobian_passes_on_smooth_maps() {
    let (c, r) = json_report(&["check-jacobian", "--seed", "3", "--instance", data("example_instance.json").to_str().unwrap()]);
    assert_eq!(c, 0);
    assert_eq!(r["seed"], 3);
    assert_eq!(r["details"]["directions"], 20);
}

#[test]
fn compare_carries_the_reduction_cross_check() {
    let (c, r) = json_report(&["compare", "--instance", data("example_solved.json").to_str().unwrap()]);
    assert_eq!(c, 0);
    let d = &r["details"];
    assert_eq!(d["explicit"]["mode"], "explicit");
    assert!(d["reduced_builtin_residual"].as_f64().unwrap() <= 1e-6);
    assert_eq!(d["reduced_builtin_residual"], d["reduced"]["stationarity"]);
}

#[test]
fn restore_handles_relaxed_policies() {
    let dir = tempfile::tempdir().unwrap();
    // Scenario leaves of the bundled tree are nodes 3 and 4.
    let policy = r#"{"mode": "relaxed", "dim": 1, "stages": [
        {"3": [5.0], "4": [-5.0]}, {"3": [1.0], "4": [2.0]}, {"3": [0.0], "4": [-3.0]}]}"#;
    let path = dir.path().join("u.json");
    fs::write(&path, policy).unwrap();
    let inst = data("example_instance.json");
    let (c, r) = json_report(&["restore", "--instance", inst.to_str().unwrap(), "--policy", path.to_str().unwrap()]);
    assert_eq!(c, 0, "{r}");
    assert_eq!(r["details"]["mode"], "relaxed");
    assert_eq!(r["details"]["restored_gap"], 0.0);
    assert!(r["details"]["total_deviation"].as_f64().unwrap() <= r["details"]["bound"].as_f64().unwrap());
}

#[test]
fn estimate_c_confirms_the_declared_constant() {
    let (c, r) = json_report(&["estimate-C", "--samples", "200", "--instance", data("example_instance.json").to_str().unwrap()]);
    assert_eq!(c, 0);
    assert!(r["details"]["max_ratio"].as_f64().unwrap() <= 2.0);
}

#[test]
fn infeasible_candidate_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let policy = r#"{"mode": "builtin", "dim": 1, "stages": [{"0": [40.0]}, {"1": [0.0], "2": [0.0]}, {"3": [0.0], "4": [0.0]}]}"#;
    let path = dir.path().join("far.json");
    fs::write(&path, policy).unwrap();
    let inst = data("example_solved.json");
    let out = kit(&["verify-kkt", "--instance", inst.to_str().unwrap(), "--policy", path.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("infeasible"));
}

#[test]
fn usage_and_schema_errors_exit_4() {
    let out = kit(&["check-adjoint", "--bogus"]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    assert_eq!(code(&kit(&["restore"])), 4);

    let dir = tempfile::tempdir().unwrap();
    let mut file: Value = serde_json::from_slice(&fs::read(data("example_instance.json")).unwrap()).unwrap();
    file["constants"]["c"] = Value::from(-1.0);
    let path = dir.path().join("neg.json");
    fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
    let out = kit(&["restore", "--instance", path.to_str().unwrap()]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("/constants/c"));
}

#[test]
fn thread_count_does_not_change_reports() {
    let inst = data("example_instance.json");
    let base = ["estimate-C", "--samples", "100", "--seed", "11", "--instance", inst.to_str().unwrap()];
    let (_, one) = json_report(&[&base[..], &["--threads", "1"]].concat());
    let (_, four) = json_report(&[&base[..], &["--threads", "4"]].concat());
    assert_eq!(one["details"], four["details"]);
    assert_eq!(four["threads"], 4);
}

#[test]
fn penalty_solve_lands_near_brute_force() {
    let inst = data("example_instance.json");
    let (_, bf) = json_report(&["solve", "--instance", inst.to_str().unwrap()]);
    let (_, pen) = json_report(&["solve", "--method", "penalty", "--k", "400", "--steps", "3000", "--instance", inst.to_str().unwrap()]);
    let a = bf["details"]["objective"].as_f64().unwrap();
    let b = pen["details"]["objective"].as_f64().unwrap();
    assert!(b >= a - 1e-9, "penalty {b} beat brute force {a}");
    assert!(b - a <= 1e-3, "penalty {b} vs brute force {a}");
}

#[test]
fn text_report_goes_to_out() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.txt");
    let inst = data("example_instance.json");
    let out = kit(&["check-adjoint", "--instance", inst.to_str().unwrap(), "--out", path.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(out.stdout.is_empty());
    assert!(fs::read_to_string(&path).unwrap().starts_with("check-adjoint: PASS"));
}
