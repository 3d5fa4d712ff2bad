use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SCENARIO: &str = r#"
schema = "tclab.scenario/1"
name = "cli-identity"
checks = ["fp", "pathwise"]

[process]
kind = "brownian_motion"
x0 = 0.0

[coefficient]
t0 = 1.0
h = { kind = "constant", value = 1.0 }
sigma_tilde = { kind = "constant", value = 1.0 }

[grid]
points = 11

[monte_carlo]
n = 300
mesh = 0.002
master_seed = 5
"#;

fn tclab(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tclab")).args(args).current_dir(dir).env_remove("TCLAB_WORKERS").output().unwrap()
}

fn setup(text: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("scenario.toml"), text).unwrap();
    dir
}

fn report(dir: &Path, out: &str) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join(out).join("report.json")).unwrap()).unwrap()
}

#[test]
fn run_writes_report_and_exits_zero() {
    let dir = setup(SCENARIO);
    let out = tclab(&["run", "--config", "scenario.toml", "--out", "out"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(dir.path(), "out");
    assert_eq!(r["checks"]["fp"]["verdict"]["status"], "pass");
    assert_eq!(r["checks"]["pathwise"]["verdict"]["status"], "pass");
    assert_eq!(r["checks"]["uniqueness"]["verdict"]["status"], "skipped");
    assert_eq!(r["seed"], 5);
    assert!(String::from_utf8_lossy(&out.stdout).contains("fp"));
}

#[test]
fn single_check_subcommand_and_seed_override() {
    let dir = setup(SCENARIO);
    let out = tclab(&["check-fp", "--config", "scenario.toml", "--out", "fp", "--seed", "99", "--workers", "2"], dir.path());
    assert!(out.status.success());
    let r = report(dir.path(), "fp");
    assert_eq!(r["seed"], 99);
    assert_eq!(r["checks"]["pathwise"]["verdict"]["status"], "skipped");
}

#[test]
fn simulate_exports_ensemble() {
    let dir = setup(SCENARIO);
    let out = tclab(&["simulate", "--config", "scenario.toml", "--out", "sim"], dir.path());
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.path().join("sim/ensemble.csv")).unwrap();
    assert!(csv.starts_with("path_id,t,value\r\n"));
    assert_eq!(csv.lines().count(), 1 + 300 * 11);
    assert!(dir.path().join("sim/timechange_0.csv").exists());

    let back = tclab(&["check-fp", "--config", "scenario.toml", "--out", "ext", "--ensemble", "sim/ensemble.csv"], dir.path());
    assert!(back.status.success());
    assert_eq!(report(dir.path(), "ext")["checks"]["fp"]["details"]["provenance"], "external");
}

#[test]
fn worker_env_var_does_not_change_artifacts() {
    let dir = setup(SCENARIO);
    for (w, out) in [("1", "w1"), ("4", "w4")] {
        let o = Command::new(env!("CARGO_BIN_EXE_tclab"))
            .args(["simulate", "--config", "scenario.toml", "--out", out])
            .current_dir(dir.path())
            .env("TCLAB_WORKERS", w)
            .output()
            .unwrap();
        assert!(o.status.success());
    }
    assert_eq!(fs::read(dir.path().join("w1/ensemble.csv")).unwrap(), fs::read(dir.path().join("w4/ensemble.csv")).unwrap());
}

#[test]
fn config_errors_exit_two_with_location() {
    let dir = setup(&SCENARIO.replace("points = 11", "points = 11\nbogus = 1"));
    let out = tclab(&["run", "--config", "scenario.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bogus") && err.contains("line"), "{err}");

    let dir = setup(&SCENARIO.replace("n = 300", "n = 50"));
    let out = tclab(&["run", "--config", "scenario.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tolerance_overrides_reach_the_report() {
    let dir = setup(SCENARIO);
    let out = tclab(&["check-pathwise", "--config", "scenario.toml", "--out", "o", "--tol", "solver_tol=1e-10,pathwise_slack=0"], dir.path());
    assert!(out.status.success());
    let r = report(dir.path(), "o");
    assert_eq!(r["scenario"]["tolerances"]["solver_tol"], 1e-10);

    let bad = tclab(&["run", "--config", "scenario.toml", "--tol", "nonsense=3"], dir.path());
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn failing_check_exits_one() {
    // a tiny KS constant makes the comparison reject
    let dir = setup(&SCENARIO.replace("checks = [\"fp\", \"pathwise\"]", "checks = [\"uniqueness\"]"));
    let out = tclab(&["run", "--config", "scenario.toml", "--out", "o", "--tol", "ks_c_alpha=0.001"], dir.path());
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn shipped_scenarios_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut count = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            tclab::harness::Scenario::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            count += 1;
        }
    }
    assert!(count >= 4);
}
