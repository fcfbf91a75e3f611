//! Convergence ladders over `N`, path count and basis degree.

use serde_json::json;
use volterra_fk::backward::solve_type1;
use volterra_fk::coefficients::{linear_spec, KernelSpec};
use volterra_fk::exec;
use volterra_fk::forward::simulate;
use volterra_fk::grid::{derive_seed, make_grid};
use volterra_fk::linear_oracle::closed_form;

use crate::commands::{backward_options, brownian, family, grid, run_fk};
use crate::config::ExperimentConfig;
use crate::report::{Check, Outcome, Table};
use crate::CliError;

/// Reference grid of the `N` ladder, as a multiple of the finest rung.
const REFERENCE_REFINEMENT: usize = 8;

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn integers(cfg: &ExperimentConfig, key: &str) -> Result<Vec<usize>, CliError> {
    let values = &cfg.converge.values;
    if values.len() < 3 {
        return Err(CliError::Config(format!(
            "converge.values: a {key} ladder needs at least 3 rungs, got {}",
            values.len()
        )));
    }
    values
        .iter()
        .map(|&v| {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(CliError::Config(format!("converge.values: {key} rung {v} is not a positive integer")))
            }
        })
        .collect()
}

pub fn converge(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    match (cfg.converge.op.as_str(), cfg.converge.ladder.as_str()) {
        ("solve-bsvie" | "linear-oracle", "N") => n_ladder(cfg),
        ("simulate-forward", "paths") => path_ladder(cfg),
        ("fk-check", "degree") => degree_ladder(cfg),
        (op, ladder) => Err(CliError::Config(format!(
            "converge.op/converge.ladder: no oracle for a {ladder} ladder of '{op}' \
             (supported: solve-bsvie or linear-oracle over N, simulate-forward over paths, fk-check over degree)"
        ))),
    }
}

/// Error of the sweep's `E[Y_0]` against a fine-grid closed form.
fn n_ladder(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let rungs = integers(cfg, "N")?;
    if !matches!(cfg.coeff.name.as_str(), "linear" | "linear-volterra") {
        return Err(CliError::Config(format!(
            "coeff.name: an N ladder needs the linear family, got '{}'",
            cfg.coeff.name
        )));
    }
    // The deterministic variant has a sampling-free reference.
    let variant = cfg
        .coeff
        .params
        .get("variant")
        .and_then(|v| v.as_str())
        .unwrap_or("deterministic")
        .to_string();
    let spec = linear_spec(&variant).map_err(|e| CliError::Config(format!("coeff.params.variant: {e}")))?;
    let c = spec.coefficients();
    let opts = backward_options(cfg)?;
    let finest = *rungs.iter().max().expect("non-empty");
    let gref = make_grid(cfg.grid.horizon, finest * REFERENCE_REFINEMENT)
        .map_err(|e| CliError::Config(format!("grid: {e}")))?;
    let bref = brownian(cfg, &gref, cfg.mc.paths, derive_seed(cfg.mc.seed, 0xBEEF))?;
    let reference = closed_form(&spec, &gref, &bref)?;
    let (yref, se_ref) = (reference.mean_y[0], reference.stderr_y[0]);
    let mut table = Table::new("converge.csv", &["rung", "N", "dt", "estimate", "stderr", "error"]);
    let mut dts = Vec::new();
    let mut errors = Vec::new();
    for (r, &n) in rungs.iter().enumerate() {
        let g = make_grid(cfg.grid.horizon, n).map_err(|e| CliError::Config(format!("converge.values: {e}")))?;
        let bw = brownian(cfg, &g, cfg.mc.paths, derive_seed(cfg.mc.seed, r as u64))?;
        let fwd = simulate(&c, &g, &bw, &vec![0.0; n + 1], Default::default())?;
        let sol = solve_type1(&c, &fwd, &bw, &opts)?;
        let err = (sol.mean_y[0] - yref).abs();
        table.push(vec![
            r.to_string(),
            n.to_string(),
            format!("{:.17e}", g.dt()),
            format!("{:.17e}", sol.mean_y[0]),
            format!("{:.17e}", sol.stderr_y[0]),
            format!("{err:.17e}"),
        ]);
        dts.push(g.dt());
        errors.push(err.max(f64::MIN_POSITIVE));
    }
    let order = log_slope(&dts, &errors);
    let checks = vec![Check::at_least("fitted order in dt", order, 0.8)];
    Ok(Outcome {
        results: json!({
            "ladder": "N",
            "variant": variant,
            "reference_N": finest * REFERENCE_REFINEMENT,
            "reference": yref,
            "reference_stderr": se_ref,
            "errors": errors,
            "fitted_order": order,
        }),
        checks,
        tables: vec![table],
    })
}

/// RMS error of the sample second moment of `X_T` for a Gaussian kernel
/// family against its exact discrete value.
fn path_ladder(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let rungs = integers(cfg, "paths")?;
    let c = family(&cfg.coeff, "coeff")?;
    let kernel = match c.kernel {
        Some(k @ KernelSpec::Fractional { .. }) if c.name == "fbm" => k,
        _ => {
            return Err(CliError::Config(format!(
                "coeff: a paths ladder needs the fbm family, got '{}'",
                c.name
            )))
        }
    };
    let g = grid(cfg)?;
    let n = g.steps();
    let x0 = cfg.task.x0;
    // X_T = x0 + Σ_k K(T − t_k) ΔW_k.
    let exact = x0 * x0 + (0..n).map(|k| kernel.eval(g.t(n) - g.t(k)).powi(2) * g.dt()).sum::<f64>();
    let reps = cfg.converge.replicates.max(2);
    let mut table = Table::new("converge.csv", &["rung", "paths", "rms_error", "replicates"]);
    let mut xs = Vec::new();
    let mut errors = Vec::new();
    for (r, &paths) in rungs.iter().enumerate() {
        let mut sq = 0.0;
        for q in 0..reps {
            let seed = derive_seed(derive_seed(cfg.mc.seed, r as u64), q as u64);
            let bw = brownian(cfg, &g, paths, seed)?;
            let sol = simulate(&c, &g, &bw, &vec![x0; n + 1], Default::default())?;
            let m2: Vec<f64> = sol.x.column(n).iter().map(|v| v * v).collect();
            let (m, _) = exec::mean_stderr(&m2);
            sq += (m - exact) * (m - exact);
        }
        let rms = (sq / reps as f64).sqrt();
        table.push(vec![r.to_string(), paths.to_string(), format!("{rms:.17e}"), reps.to_string()]);
        xs.push(paths as f64);
        errors.push(rms.max(f64::MIN_POSITIVE));
    }
    let slope = log_slope(&xs, &errors);
    let checks = vec![
        Check::at_least("log-log slope lower bound", slope, -0.6),
        Check::at_most("log-log slope upper bound", slope, -0.4),
    ];
    Ok(Outcome {
        results: json!({
            "ladder": "paths",
            "exact_second_moment": exact,
            "errors": errors,
            "fitted_order": slope,
        }),
        checks,
        tables: vec![table],
    })
}

/// RMS Feynman–Kac discrepancy per basis degree; the nested reference is
/// shared across rungs through common seeds.
fn degree_ladder(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let rungs = integers(cfg, "degree")?;
    let mut table = Table::new("converge.csv", &["rung", "degree", "rms_discrepancy", "mean_error_bar"]);
    let mut degrees = Vec::new();
    let mut errors = Vec::new();
    let mut bars = Vec::new();
    for (r, &d) in rungs.iter().enumerate() {
        let mut c = cfg.clone();
        c.basis.degree = d;
        let report = run_fk(&c, &backward_options(&c)?)?;
        let bar = report.points.iter().map(|p| p.error_bar).sum::<f64>() / report.points.len().max(1) as f64;
        table.push(vec![
            r.to_string(),
            d.to_string(),
            format!("{:.17e}", report.rms_discrepancy),
            format!("{bar:.17e}"),
        ]);
        degrees.push(d as f64);
        errors.push(report.rms_discrepancy.max(f64::MIN_POSITIVE));
        bars.push(bar);
    }
    // Nonincreasing up to the Monte Carlo noise of the discrepancy itself.
    let worst_rise = errors
        .windows(2)
        .zip(bars.windows(2))
        .map(|(e, b)| (e[1] - e[0]) - b[0].max(b[1]))
        .fold(f64::NEG_INFINITY, f64::max);
    let checks = vec![Check::at_most("discrepancy rise beyond error bar", worst_rise, 0.0)];
    Ok(Outcome {
        results: json!({
            "ladder": "degree",
            "errors": errors,
            "mean_error_bars": bars,
            "fitted_order": log_slope(&degrees, &errors),
        }),
        checks,
        tables: vec![table],
    })
}
