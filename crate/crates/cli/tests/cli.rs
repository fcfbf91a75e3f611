use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    run_env(dir, args, &[])
}

fn run_env(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_volterra-fk"));
    cmd.args(args).arg("--out").arg(dir).env_remove("VOLTERRA_FK_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn explain(o: &Output) -> String {
    format!(
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

#[test]
fn decoupled_duality_is_exact() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["duality-check", "--pair", "decoupled", "--N", "16", "--paths", "200"]);
    assert_eq!(code(&o), 0, "{}", explain(&o));
    let r = report(d.path());
    assert_eq!(r["schema_version"], 1);
    assert!(r["results"]["residual"].as_f64().unwrap() < 1e-12);
    assert_eq!(r["results"]["pass"], true);
    let checks = r["invariant_checks"].as_array().unwrap();
    assert!(!checks.is_empty());
    for c in checks {
        for key in ["name", "pass", "value", "tolerance"] {
            assert!(c.get(key).is_some(), "missing {key}");
        }
    }
    assert_eq!(r["config_hash"].as_str().unwrap().len(), 64);
    assert!(r["runtime_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn malformed_config_key_is_named() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.json");
    std::fs::write(&cfg, r#"{"grid": {"N": 8, "steps_typo": 3}}"#).unwrap();
    let o = run(d.path(), &["simulate-forward", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("steps_typo"), "{}", explain(&o));
}

#[test]
fn unknown_family_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["solve-bsvie", "--coeff", "nope", "--N", "4", "--paths", "50"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"coeff": {"name": "bm"}, "grid": {"T": 2.0, "N": 4}, "mc": {"paths": 30, "seed": 9}}"#,
    )
    .unwrap();
    let o = run(d.path(), &["simulate-forward", "--config", cfg.to_str().unwrap(), "--N", "6"]);
    assert_eq!(code(&o), 0, "{}", explain(&o));
    let r = report(d.path());
    assert_eq!(r["config"]["grid"]["N"], 6);
    assert_eq!(r["config"]["grid"]["T"], 2.0);
    assert_eq!(r["config"]["mc"]["seed"], 9);
    let csv = std::fs::read_to_string(d.path().join("paths.csv")).unwrap();
    assert!(csv.starts_with("path,k,t,X\n"));
    assert_eq!(csv.lines().count(), 1 + 30 * 7);
}

#[test]
fn reports_are_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["solve-bsvie", "--N", "8", "--paths", "800", "--seed", "4"];
    assert_eq!(code(&run(a.path(), &args)), 0);
    assert_eq!(code(&run_env(b.path(), &args, &[("VOLTERRA_FK_THREADS", "1")])), 0);
    let (ra, rb) = (report(a.path()), report(b.path()));
    assert_eq!(ra["results"], rb["results"]);
    assert_eq!(rb["workers"], 1);
    assert_eq!(
        std::fs::read(a.path().join("bsvie.csv")).unwrap(),
        std::fs::read(b.path().join("bsvie.csv")).unwrap()
    );
}

#[test]
fn invalid_thread_cap_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    let o = run_env(d.path(), &["simulate-forward", "--N", "4", "--paths", "10"], &[("VOLTERRA_FK_THREADS", "zero")]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("VOLTERRA_FK_THREADS"));
}

#[test]
fn backward_solvers_run_their_checks() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["solve-type2", "--coeff", "type2-linear", "--N", "8", "--paths", "3000"]);
    assert_eq!(code(&o), 0, "{}", explain(&o));
    let names: Vec<String> = report(d.path())["invariant_checks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["name"].as_str().unwrap().to_string())
        .collect();
    assert!(names.iter().any(|n| n == "martingale residual"));
    assert!(names.iter().any(|n| n == "diagonal mismatches"));
    let o = run(d.path(), &["solve-bsvie", "--coeff", "type2-linear", "--N", "4", "--paths", "100"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn comparison_of_shifted_driver() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["compare", "--N", "8", "--paths", "2000", "--param-b", "shift_g=0.2"]);
    assert_eq!(code(&o), 0, "{}", explain(&o));
    assert_eq!(report(d.path())["results"]["violations"], 0);
}

#[test]
fn linear_oracle_selectors() {
    let d = tempfile::tempdir().unwrap();
    let o = run(
        d.path(),
        &["linear-oracle", "--alpha", "exp-decay", "--beta", "zero", "--xi", "one-plus-t", "--N", "16", "--paths", "300"],
    );
    assert_eq!(code(&o), 0, "{}", explain(&o));
    let r = report(d.path());
    assert_eq!(r["results"]["deterministic"], true);
    for key in ["lhs", "rhs", "residual", "stderr", "pass"] {
        assert!(r["results"].get(key).is_some(), "missing {key}");
    }
    let o = run(d.path(), &["linear-oracle", "--alpha", "bogus"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn terminal_slice_of_u_is_g() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["eval-ppde", "--coeff", "bm", "--N", "4", "--t", "1", "--s", "4", "--x0", "0.75"]);
    assert_eq!(code(&o), 0, "{}", explain(&o));
    let r = report(d.path());
    assert_eq!(r["results"]["estimate"], 0.75);
    assert_eq!(r["results"]["stderr"], 0.0);
    let o = run(d.path(), &["eval-ppde", "--N", "4", "--t", "3", "--s", "1"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn fk_budget_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let o = run(
        d.path(),
        &["fk-check", "--N", "4", "--paths", "300", "--inner-paths", "1000", "--budget", "10"],
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("budget"));
}

#[test]
fn fk_check_small() {
    let d = tempfile::tempdir().unwrap();
    let o = run(
        d.path(),
        &["fk-check", "--coeff", "bm", "--N", "8", "--paths", "4000", "--inner-paths", "4000", "--points", "0:2,1:5"],
    );
    assert_eq!(code(&o), 0, "{}", explain(&o));
    let csv = std::fs::read_to_string(d.path().join("fk.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn path_derivative_of_martingale() {
    let d = tempfile::tempdir().unwrap();
    let eta = "0,0,1,1,1,1,1,1,2";
    let o = run(
        d.path(),
        &["path-derivative", "--coeff", "bm", "--N", "8", "--paths", "500", "--t", "1", "--s", "2", "--eta", eta],
    );
    assert_eq!(code(&o), 0, "{}", explain(&o));
    let r = report(d.path());
    assert!((r["results"]["variational"]["value"].as_f64().unwrap() - 2.0).abs() < 1e-9);
}

#[test]
fn coupled_solver_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["solve-coupled", "--param", "kappa=0.2", "--N", "8", "--paths", "2000"]);
    assert_eq!(code(&o), 0, "{}", explain(&o));
    let csv = std::fs::read_to_string(d.path().join("picard.csv")).unwrap();
    assert!(csv.starts_with("iteration,gap,ratio\n"));
    let o = run(d.path(), &["solve-coupled", "--param", "kappa=50", "--N", "8", "--paths", "2000"]);
    assert_eq!(code(&o), 3, "{}", explain(&o));
    let r = report(d.path());
    assert!(r["results"]["error"].as_str().unwrap().contains("no contraction"));
}

#[test]
fn converge_in_steps_has_first_order() {
    let d = tempfile::tempdir().unwrap();
    let o = run(
        d.path(),
        &["converge", "--op", "solve-bsvie", "--coeff", "linear", "--N", "16,32,64,128", "--paths", "500"],
    );
    assert_eq!(code(&o), 0, "{}", explain(&o));
    let r = report(d.path());
    assert!(r["results"]["fitted_order"].as_f64().unwrap() >= 0.8);
    let csv = std::fs::read_to_string(d.path().join("converge.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn converge_in_paths_has_clt_rate() {
    let d = tempfile::tempdir().unwrap();
    let o = run(
        d.path(),
        &[
            "converge", "--op", "simulate-forward", "--coeff", "fbm", "--N", "16", "--paths", "250,1000,4000,16000",
            "--replicates", "64",
        ],
    );
    assert_eq!(code(&o), 0, "{}", explain(&o));
    let slope = report(d.path())["results"]["fitted_order"].as_f64().unwrap();
    assert!((-0.6..=-0.4).contains(&slope), "{slope}");
}

#[test]
fn converge_needs_three_rungs() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["converge", "--op", "solve-bsvie", "--coeff", "linear", "--N", "16,32"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("at least 3"));
}

#[test]
fn converge_in_degree_does_not_increase() {
    let d = tempfile::tempdir().unwrap();
    let o = run(
        d.path(),
        &[
            "converge", "--op", "fk-check", "--basis-degree", "1,2,3", "--N", "8", "--paths", "8000", "--inner-paths",
            "4000",
        ],
    );
    assert_eq!(code(&o), 0, "{}", explain(&o));
    let csv = std::fs::read_to_string(d.path().join("converge.csv")).unwrap();
    assert!(csv.starts_with("rung,degree,rms_discrepancy,mean_error_bar\n"));
}
