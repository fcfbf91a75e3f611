//! One function per subcommand. Each runs the solver, its invariant checks
//! and assembles tables and results.

use serde_json::json;
use volterra_fk::backward::{compare, solve, solve_type1, solve_type2, BackwardOptions, BackwardSolution};
use volterra_fk::coefficients::{builtin, linear_from_selectors, CoefficientSet, PathView};
use volterra_fk::condexp::BasisSpec;
use volterra_fk::exec;
use volterra_fk::forward::{moment_report, restart, simulate, ForwardOptions, ForwardSolution};
use volterra_fk::grid::{derive_seed, make_grid, BrownianBatch, TimeGrid};
use volterra_fk::linear_oracle::{closed_form, dual_pair, duality_check, resolvent_residual, ResolventTable};
use volterra_fk::ppde::{
    eval_u, fk_check, path_derivative, solve_coupled, FiniteDifference, FkOptions, FkReport, MonteCarlo,
};

use crate::config::{params_of, CoeffConfig, ExperimentConfig};
use crate::report::{Check, Outcome, Table};
use crate::CliError;

/// Paths of the small side run that materializes the two-time fields.
const FIELD_CHECK_PATHS: usize = 2000;

pub fn grid(cfg: &ExperimentConfig) -> Result<TimeGrid, CliError> {
    make_grid(cfg.grid.horizon, cfg.grid.steps).map_err(|e| CliError::Config(format!("grid: {e}")))
}

pub fn brownian(cfg: &ExperimentConfig, g: &TimeGrid, paths: usize, seed: u64) -> Result<BrownianBatch, CliError> {
    BrownianBatch::sample(g, paths, 1, seed, cfg.mc.antithetic).map_err(|e| CliError::Config(format!("mc: {e}")))
}

pub fn family(c: &CoeffConfig, key: &str) -> Result<CoefficientSet, CliError> {
    let name = if c.name == "linear" { "linear-volterra" } else { c.name.as_str() };
    builtin(name, &params_of(c)).map_err(|e| CliError::Config(format!("{key}: {e}")))
}

pub fn backward_options(cfg: &ExperimentConfig) -> Result<BackwardOptions, CliError> {
    let basis = BasisSpec {
        degree: cfg.basis.degree,
        pivots: cfg.basis.pivots,
        ridge: cfg.basis.ridge,
        ..BasisSpec::default()
    };
    basis.validate().map_err(|e| CliError::Config(format!("basis: {e}")))?;
    Ok(BackwardOptions {
        basis,
        implicit: cfg.basis.implicit,
        ..BackwardOptions::default()
    })
}

fn forward_options(cfg: &ExperimentConfig) -> ForwardOptions {
    ForwardOptions {
        pivots: cfg.basis.pivots,
        ..ForwardOptions::default()
    }
}

fn uncoupled(c: &CoefficientSet, key: &str) -> Result<(), CliError> {
    if c.meta.coupled {
        return Err(CliError::Config(format!(
            "{key}: family '{}' reads the backward solution; use solve-coupled",
            c.name
        )));
    }
    Ok(())
}

fn fmt(v: f64) -> String {
    format!("{v:.17e}")
}

/// Largest relative restart error over the rows `rows`.
fn restart_error(sol: &ForwardSolution, bw: &BrownianBatch, rows: &[usize]) -> Result<f64, CliError> {
    let mut worst = 0.0f64;
    for &i in rows {
        let again = restart(sol, i, bw)?;
        for (a, b) in again.as_slice().iter().zip(sol.x.as_slice()) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    Ok(worst)
}

fn check_rows(n: usize) -> Vec<usize> {
    let mut rows = vec![0, n / 4, n / 2, n.saturating_sub(1), n];
    rows.dedup();
    rows
}

pub fn simulate_forward(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let g = grid(cfg)?;
    let c = family(&cfg.coeff, "coeff")?;
    uncoupled(&c, "coeff")?;
    let bw = brownian(cfg, &g, cfg.mc.paths, cfg.mc.seed)?;
    let x0 = cfg.x0_path()?;
    let sol = simulate(&c, &g, &bw, &x0, forward_options(cfg))?;
    let n = g.steps();
    let moments = moment_report(&sol, &x0);
    let xt = sol.x.column(n);
    let (mean_xt, se_xt) = exec::mean_stderr(&xt);
    let sq: Vec<f64> = xt.iter().map(|v| v * v).collect();
    let (m2, se_m2) = exec::mean_stderr(&sq);
    let mut table = Table::new("paths.csv", &["path", "k", "t", "X"]);
    for p in 0..sol.n_paths() {
        for k in 0..=n {
            table.push(vec![p.to_string(), k.to_string(), fmt(g.t(k)), fmt(sol.x.get(p, k))]);
        }
    }
    let checks = vec![
        Check::holds("finite paths", sol.x.all_finite()),
        Check::at_most("restart exactness", restart_error(&sol, &bw, &check_rows(n))?, cfg.tolerances.restart),
    ];
    let results = json!({
        "family": c.name,
        "sup_second_moment": moments.sup_second_moment,
        "moment_constant": moments.constant,
        "mean_x_T": mean_xt,
        "stderr_x_T": se_xt,
        "second_moment_x_T": m2,
        "stderr_second_moment_x_T": se_m2,
    });
    Ok(Outcome {
        results,
        checks,
        tables: vec![table],
    })
}

fn mean_table(file: &str, g: &TimeGrid, sol: &BackwardSolution) -> Table {
    let mut t = Table::new(file, &["i", "t_i", "mean_Y", "stderr"]);
    for k in 0..g.n_nodes() {
        t.push(vec![k.to_string(), fmt(g.t(k)), fmt(sol.mean_y[k]), fmt(sol.stderr_y[k])]);
    }
    t
}

/// Checks shared by the backward solves.
fn backward_checks(
    cfg: &ExperimentConfig,
    c: &CoefficientSet,
    g: &TimeGrid,
    fwd: &ForwardSolution,
    bw: &BrownianBatch,
    sol: &BackwardSolution,
    opts: &BackwardOptions,
) -> Result<Vec<Check>, CliError> {
    let n = g.steps();
    let terminal_ok = (0..fwd.n_paths()).all(|p| {
        let view = PathView::new(fwd.x.path(p), bw.levels_of(p), g.dt());
        (c.g)(g.t(n), &view).to_bits() == sol.y.get(p, n).to_bits()
    });
    // Diagonal identity on a small side run with the fields materialized.
    let small = brownian(cfg, g, cfg.mc.paths.min(FIELD_CHECK_PATHS), cfg.mc.seed)?;
    let sfwd = simulate(c, g, &small, &cfg.x0_path()?, forward_options(cfg))?;
    let with_fields = BackwardOptions {
        store_fields: true,
        ..*opts
    };
    let ssol = solve(c, &sfwd, &small, &with_fields)?;
    let yt = ssol.ytilde.as_ref().expect("fields stored");
    let mut mismatches = 0usize;
    for p in 0..small.n_paths() {
        for k in 0..=n {
            mismatches += usize::from(yt.get(p, k, k)?.to_bits() != ssol.y.get(p, k).to_bits());
        }
    }
    Ok(vec![
        Check::holds("finite solution", sol.y.all_finite()),
        Check::holds("terminal value equals g", terminal_ok),
        Check::at_most("diagonal mismatches", mismatches as f64, 0.0),
    ])
}

fn backward(cfg: &ExperimentConfig, type2: bool) -> Result<Outcome, CliError> {
    let g = grid(cfg)?;
    let c = family(&cfg.coeff, "coeff")?;
    uncoupled(&c, "coeff")?;
    let bw = brownian(cfg, &g, cfg.mc.paths, cfg.mc.seed)?;
    let fwd = simulate(&c, &g, &bw, &cfg.x0_path()?, forward_options(cfg))?;
    let opts = backward_options(cfg)?;
    let sol = if type2 {
        solve_type2(&c, &fwd, &bw, &opts)?
    } else {
        solve_type1(&c, &fwd, &bw, &opts)?
    };
    let mut checks = backward_checks(cfg, &c, &g, &fwd, &bw, &sol, &opts)?;
    if type2 {
        checks.push(Check::at_most(
            "martingale residual",
            sol.max_martingale_residual(),
            cfg.tolerances.martingale,
        ));
    }
    let worst_condition = sol.diagnostics.iter().map(|d| d.condition).fold(0.0f64, f64::max);
    let results = json!({
        "family": c.name,
        "y0": sol.mean_y[0],
        "y0_stderr": sol.stderr_y[0],
        "max_condition": worst_condition,
        "pseudo_inverse_cells": sol.diagnostics.iter().filter(|d| d.pseudo_inverse).count(),
        "max_martingale_residual": if type2 { Some(sol.max_martingale_residual()) } else { None },
    });
    Ok(Outcome {
        results,
        checks,
        tables: vec![mean_table("bsvie.csv", &g, &sol)],
    })
}

pub fn solve_bsvie(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    backward(cfg, false)
}

pub fn solve_type2_cmd(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    backward(cfg, true)
}

pub fn compare_cmd(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let g = grid(cfg)?;
    let a = family(&cfg.coeff, "coeff")?;
    let b_cfg = cfg.task.coeff_b.clone().unwrap_or_else(|| {
        let mut b = cfg.coeff.clone();
        b.params.insert("shift_f".into(), json!(0.1));
        b
    });
    let b = family(&b_cfg, "task.coeff_b")?;
    uncoupled(&a, "coeff")?;
    uncoupled(&b, "task.coeff_b")?;
    let bw = brownian(cfg, &g, cfg.mc.paths, cfg.mc.seed)?;
    let fwd = simulate(&a, &g, &bw, &cfg.x0_path()?, forward_options(cfg))?;
    let r = compare(&a, &b, &fwd, &bw, &backward_options(cfg)?, cfg.tolerances.k_se)?;
    let mut t = Table::new("compare.csv", &["i", "t_i", "mean_Y_a", "mean_Y_b"]);
    for k in 0..g.n_nodes() {
        t.push(vec![k.to_string(), fmt(g.t(k)), fmt(r.mean_a[k]), fmt(r.mean_b[k])]);
    }
    let checks = vec![
        Check::holds("comparison hypotheses", r.hypotheses_hold),
        Check::at_most("comparison violations", r.violations as f64, 0.0),
    ];
    let results = json!({
        "family_a": a.name,
        "family_b": b.name,
        "max_gap": r.max_gap,
        "violations": r.violations,
        "cells": r.cells,
        "hypothesis_violations": r.hypothesis_violations,
    });
    Ok(Outcome {
        results,
        checks,
        tables: vec![t],
    })
}

pub fn linear_oracle(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let g = grid(cfg)?;
    let spec = linear_from_selectors(&cfg.task.alpha, &cfg.task.beta, &cfg.task.xi)
        .map_err(|e| CliError::Config(format!("task.alpha/beta/xi: {e}")))?;
    let c = spec.coefficients();
    let bw = brownian(cfg, &g, cfg.mc.paths, cfg.mc.seed)?;
    let fwd = simulate(&c, &g, &bw, &vec![0.0; g.n_nodes()], forward_options(cfg))?;
    let sweep = solve_type1(&c, &fwd, &bw, &backward_options(cfg)?)?;
    let cf = closed_form(&spec, &g, &bw)?;
    let rel = (0..g.n_nodes())
        .map(|k| (sweep.mean_y[k] - cf.mean_y[k]).abs() / cf.mean_y[k].abs().max(f64::MIN_POSITIVE))
        .fold(0.0f64, f64::max);
    let small = brownian(cfg, &g, cfg.mc.paths.min(8), derive_seed(cfg.mc.seed, 1))?;
    let table = ResolventTable::build(&spec, &g, &small)?;
    let res = resolvent_residual(&table.k1, &table.gamma, g.dt());
    let mut t = Table::new("linear.csv", &["i", "t_i", "sweep", "closed_form", "closed_form_stderr"]);
    for k in 0..g.n_nodes() {
        t.push(vec![
            k.to_string(),
            fmt(g.t(k)),
            fmt(sweep.mean_y[k]),
            fmt(cf.mean_y[k]),
            fmt(cf.stderr_y[k]),
        ]);
    }
    let checks = vec![
        Check::at_most("sweep vs closed form (relative)", rel, cfg.tolerances.oracle_rel),
        Check::at_most("resolvent equation residual", res, 1e-10),
    ];
    let residual = (sweep.mean_y[0] - cf.mean_y[0]).abs();
    let results = json!({
        "spec": spec.name,
        "deterministic": cf.deterministic,
        "lhs": sweep.mean_y[0],
        "rhs": cf.mean_y[0],
        "residual": residual,
        "stderr": cf.stderr_y[0],
        "max_relative_error": rel,
        "pass": checks.iter().all(|c| c.pass),
    });
    Ok(Outcome {
        results,
        checks,
        tables: vec![t],
    })
}

pub fn duality(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let g = grid(cfg)?;
    let pair = dual_pair(&cfg.task.pair).map_err(|e| CliError::Config(format!("task.pair: {e}")))?;
    let bw = brownian(cfg, &g, cfg.mc.paths, cfg.mc.seed)?;
    let r = duality_check(&pair, &g, &bw, &backward_options(cfg)?)?;
    let tol = (cfg.tolerances.k_se * r.stderr).max(1e-8);
    let checks = vec![Check::at_most("duality residual", r.residual, tol)];
    let results = json!({
        "pair": pair.name,
        "lhs": r.lhs,
        "rhs": r.rhs,
        "residual": r.residual,
        "stderr": r.stderr,
        "stderr_lhs": r.stderr_lhs,
        "stderr_rhs": r.stderr_rhs,
        "exact": r.exact,
        "pass": checks[0].pass,
    });
    Ok(Outcome {
        results,
        checks,
        tables: Vec::new(),
    })
}

pub fn eval_ppde(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let g = grid(cfg)?;
    let c = family(&cfg.coeff, "coeff")?;
    let x = cfg.x0_path()?;
    let mc = MonteCarlo {
        paths: cfg.mc.paths,
        seed: cfg.mc.seed,
    };
    let opts = backward_options(cfg)?;
    let u = eval_u(&c, &g, cfg.task.t, cfg.task.s, &x, mc, &opts)?;
    let again = eval_u(&c, &g, cfg.task.t, cfg.task.s, &x, mc, &opts)?;
    let checks = vec![
        Check::holds("finite estimate", u.estimate.is_finite() && u.stderr.is_finite()),
        Check::holds("repeat is bit-identical", u.estimate.to_bits() == again.estimate.to_bits()),
    ];
    let results = json!({
        "family": c.name,
        "t": u.t,
        "s": u.s,
        "estimate": u.estimate,
        "stderr": u.stderr,
        "paths": u.n_paths,
        "seed": u.seed,
    });
    Ok(Outcome {
        results,
        checks,
        tables: Vec::new(),
    })
}

/// Eight spread sample points `(path, index)` inside the batch and grid.
pub fn default_points(paths: usize, steps: usize) -> Vec<(usize, usize)> {
    (0..8)
        .map(|q| ((q * 37) % paths.max(1), (1 + q * steps.saturating_sub(2) / 7).min(steps)))
        .collect()
}

/// Global solve with per-path standard errors followed by the nested check.
pub fn run_fk(cfg: &ExperimentConfig, opts: &BackwardOptions) -> Result<FkReport, CliError> {
    let g = grid(cfg)?;
    let c = family(&cfg.coeff, "coeff")?;
    uncoupled(&c, "coeff")?;
    let bw = brownian(cfg, &g, cfg.mc.paths, cfg.mc.seed)?;
    let fwd = simulate(&c, &g, &bw, &cfg.x0_path()?, forward_options(cfg))?;
    let global_opts = BackwardOptions {
        diag_stderr: true,
        ..*opts
    };
    let bwd = solve_type1(&c, &fwd, &bw, &global_opts)?;
    let points = if cfg.task.points.is_empty() {
        default_points(cfg.mc.paths, g.steps())
    } else {
        cfg.task.points.clone()
    };
    let fk = FkOptions {
        inner: MonteCarlo {
            paths: cfg.task.inner_paths,
            seed: derive_seed(cfg.mc.seed, 0xF00D),
        },
        replicates: cfg.task.replicates,
        k: cfg.tolerances.k_se,
        cap: cfg.task.budget,
    };
    Ok(fk_check(&c, &fwd, &bw, &bwd, &points, &fk, opts)?)
}

pub fn fk_check_cmd(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let r = run_fk(cfg, &backward_options(cfg)?)?;
    let mut t = Table::new(
        "fk.csv",
        &["path", "i", "global", "global_stderr", "nested", "nested_stderr", "discrepancy", "error_bar"],
    );
    for p in &r.points {
        t.push(vec![
            p.path.to_string(),
            p.i.to_string(),
            fmt(p.global),
            fmt(p.global_stderr),
            fmt(p.nested),
            fmt(p.nested_stderr),
            fmt(p.discrepancy),
            fmt(p.error_bar),
        ]);
    }
    let checks = vec![Check::at_most("points beyond k error bars", r.violations as f64, 0.0)];
    let results = json!({
        "points": r.points.len(),
        "violations": r.violations,
        "max_abs_discrepancy": r.max_abs_discrepancy,
        "mean_abs_discrepancy": r.mean_abs_discrepancy,
        "mean_discrepancy": r.mean_discrepancy,
        "rms_discrepancy": r.rms_discrepancy,
    });
    Ok(Outcome {
        results,
        checks,
        tables: vec![t],
    })
}

pub fn path_derivative_cmd(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let g = grid(cfg)?;
    let c = family(&cfg.coeff, "coeff")?;
    let x = cfg.x0_path()?;
    let eta = cfg.eta_path()?;
    let mc = MonteCarlo {
        paths: cfg.mc.paths,
        seed: cfg.mc.seed,
    };
    let fd = FiniteDifference { eps: cfg.task.fd_eps };
    let d = path_derivative(&c, &g, cfg.task.t, cfg.task.s, &x, &eta, mc, &backward_options(cfg)?, fd)?;
    let checks = vec![
        Check::holds("estimators agree", d.agrees(cfg.tolerances.rel, cfg.tolerances.k_se)),
        Check::holds("finite-difference step is stable", d.richardson_ok()),
    ];
    let est = |e: &volterra_fk::ppde::Estimate| json!({"value": e.value, "stderr": e.stderr});
    let results = json!({
        "family": c.name,
        "t": cfg.task.t,
        "s": cfg.task.s,
        "variational": est(&d.variational),
        "finite_difference": est(&d.finite_difference),
        "finite_difference_half_step": est(&d.finite_difference_half),
        "resolvent": est(&d.resolvent),
        "eps": d.eps,
        "variational_vs_fd": d.var_fd,
        "variational_vs_resolvent": d.var_res,
        "fd_vs_resolvent": d.fd_res,
    });
    Ok(Outcome {
        results,
        checks,
        tables: Vec::new(),
    })
}

pub fn solve_coupled_cmd(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let g = grid(cfg)?;
    let mut coeff = cfg.coeff.clone();
    if coeff.name == CoeffConfig::default().name {
        coeff.name = "coupled".into();
    }
    let c = family(&coeff, "coeff")?;
    let bw = brownian(cfg, &g, cfg.mc.paths, cfg.mc.seed)?;
    let sol = solve_coupled(
        &c,
        &g,
        &bw,
        &cfg.x0_path()?,
        &backward_options(cfg)?,
        cfg.tolerances.picard,
        cfg.task.max_iter,
    )?;
    let ratios = sol.ratios();
    let mut t = Table::new("picard.csv", &["iteration", "gap", "ratio"]);
    for (m, gap) in sol.gaps.iter().enumerate() {
        let r = if m == 0 { f64::NAN } else { ratios[m - 1] };
        t.push(vec![(m + 1).to_string(), fmt(*gap), fmt(r)]);
    }
    let worst = ratios.iter().skip(1).fold(0.0f64, |a, &b| a.max(b));
    let checks = vec![
        Check::holds("converged", sol.converged),
        Check::at_most("contraction ratio", worst, 1.0),
    ];
    let results = json!({
        "family": c.name,
        "iterations": sol.gaps.len(),
        "gaps": sol.gaps,
        "ratios": ratios,
        "y0": sol.backward.mean_y[0],
        "y0_stderr": sol.backward.stderr_y[0],
    });
    Ok(Outcome {
        results,
        checks,
        tables: vec![t],
    })
}
