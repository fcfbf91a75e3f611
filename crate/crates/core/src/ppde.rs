//! The path-dependent PDE solution `U(t, s, x)` by restart, Feynman–Kac
//! checks, path derivatives and the coupled Picard solver.
//!
//! `U(t, s, x)` is `Ỹ^{t}_{t_s}` of the system restarted at `s` from the
//! frozen path `x`. The window sweep runs over `s+1..=N` with `t` carried as
//! an extra parameter. The last step to `s` is an average because every
//! time-`s` feature is constant across the fresh batch.

use crate::backward::{solve_type1, sweep, BackwardOptions, BackwardSolution, CoefficientProblem, SweepProblem};
use crate::coefficients::{derivative_weights, CoefficientSet, DerivativeWeights, PathView};
use crate::error::{Error, Result};
use crate::exec;
use crate::forward::{simulate_coupled, simulate_from, simulate_variational, ForwardOptions, ForwardSolution, Variation};
use crate::grid::{derive_seed, BrownianBatch, PathBatch, TimeGrid};

/// Size and seed of a Monte Carlo batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MonteCarlo {
    pub paths: usize,
    pub seed: u64,
}

/// One evaluation of `U(t, s, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UEvaluation {
    pub t: usize,
    pub s: usize,
    pub x: Vec<f64>,
    pub estimate: f64,
    /// Standard error from the pathwise spread of `g + Σ f Δ` (0 when exact).
    pub stderr: f64,
    pub n_paths: usize,
    pub seed: u64,
}

/// Fresh batch, restarted forward solution and window sweep.
struct Restart {
    bw: BrownianBatch,
    fwd: ForwardSolution,
    bwd: BackwardSolution,
}

fn check_indices(grid: &TimeGrid, t: usize, s: usize, x: &[f64]) -> Result<()> {
    if t > s || s > grid.steps() {
        return Err(Error::InvalidParameter(format!(
            "need t ≤ s ≤ N = {}, got t = {t}, s = {s}",
            grid.steps()
        )));
    }
    if x.len() != grid.n_nodes() {
        return Err(Error::Dimension(format!(
            "path has {} nodes, grid has {}",
            x.len(),
            grid.n_nodes()
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn restart(
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    t: usize,
    s: usize,
    x: &[f64],
    mc: MonteCarlo,
    opts: &BackwardOptions,
    track: bool,
    fields: bool,
) -> Result<Restart> {
    if coeffs.meta.type2 {
        return Err(Error::Unsupported("U for type-II families".into()));
    }
    let bw = BrownianBatch::sample(grid, mc.paths, 1, mc.seed, false)?;
    let fwd = simulate_from(coeffs, grid, &bw, x, s, ForwardOptions::default())?;
    let mut o = *opts;
    o.track_extras |= track;
    o.store_fields |= fields && !coeffs.derivatives.as_ref().is_some_and(|d| d.driver_affine);
    let problem = CoefficientProblem::new(coeffs, &fwd, &bw, false);
    let bwd = sweep(&problem, &fwd, &bw, s + 1, &[t], &o)?;
    Ok(Restart { bw, fwd, bwd })
}

/// Per-path `Ỹ^{t}_{t_{s+1}} + f(t, t_{s+1}, ·) Δ` of a window sweep for an
/// extra parameter `t`.
fn last_step<P: SweepProblem>(problem: &P, bwd: &BackwardSolution, t: usize, s: usize, dt: f64) -> Vec<f64> {
    let e = &bwd.extras[0];
    exec::map_indexed(e.y_at_start.len(), |p| {
        e.y_at_start[p] + problem.driver(t, s + 1, p, bwd.y.get(p, s + 1), e.z_at_start[p], None) * dt
    })
}

/// `g + Σ f Δ` along each path with the driver arguments of the sweep. Its
/// spread gives an honest standard error for the regression chain.
fn pathwise_values<P: SweepProblem>(problem: &P, bwd: &BackwardSolution, t: usize, s: usize, dt: f64, implicit: bool) -> Vec<f64> {
    let (_, z) = bwd.extras[0].trajectory.as_ref().expect("tracked extras");
    let n = bwd.y.n_nodes() - 1;
    exec::map_indexed(z.n_paths(), |p| {
        let mut acc = problem.terminal(t, p);
        for k in s..n {
            let r = if implicit { k.max(s + 1) } else { k + 1 };
            acc += problem.driver(t, r, p, bwd.y.get(p, r), z.get(p, r), None) * dt;
        }
        acc
    })
}

fn terminal_value(coeffs: &CoefficientSet, grid: &TimeGrid, t: usize, x: &[f64]) -> f64 {
    let zero = vec![0.0; x.len()];
    (coeffs.g)(grid.t(t), &PathView::new(x, &zero, grid.dt()))
}

fn u_targets(
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    t: usize,
    s: usize,
    x: &[f64],
    mc: MonteCarlo,
    opts: &BackwardOptions,
) -> Result<Vec<f64>> {
    let r = restart(coeffs, grid, t, s, x, mc, opts, false, false)?;
    let problem = CoefficientProblem::new(coeffs, &r.fwd, &r.bw, false);
    Ok(last_step(&problem, &r.bwd, t, s, grid.dt()))
}

/// `U(t_t, t_s, x)` from a fresh batch seeded with `mc.seed`.
///
/// At `s = N` the terminal value `g(t, x)` is returned exactly. The terminal
/// functional sees `W ≡ 0` there, so it should read the path only through `x`.
pub fn eval_u(
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    t: usize,
    s: usize,
    x: &[f64],
    mc: MonteCarlo,
    opts: &BackwardOptions,
) -> Result<UEvaluation> {
    check_indices(grid, t, s, x)?;
    let (estimate, stderr) = if s == grid.steps() {
        (terminal_value(coeffs, grid, t, x), 0.0)
    } else {
        let r = restart(coeffs, grid, t, s, x, mc, opts, true, false)?;
        let problem = CoefficientProblem::new(coeffs, &r.fwd, &r.bw, false);
        let (estimate, _) = exec::mean_stderr(&last_step(&problem, &r.bwd, t, s, grid.dt()));
        let (_, stderr) = exec::mean_stderr(&pathwise_values(&problem, &r.bwd, t, s, grid.dt(), opts.implicit));
        (estimate, stderr)
    };
    Ok(UEvaluation {
        t,
        s,
        x: x.to_vec(),
        estimate,
        stderr,
        n_paths: mc.paths,
        seed: mc.seed,
    })
}

/// One Feynman–Kac comparison point.
#[derive(Debug, Clone, PartialEq)]
pub struct FkPoint {
    pub path: usize,
    pub i: usize,
    /// `Y_{t_i}` of the global solve on `path`.
    pub global: f64,
    /// Regression standard error of `global` (0 when not recorded).
    pub global_stderr: f64,
    /// `U(t_i, t_i, X̂^{t_i})` by nested restart.
    pub nested: f64,
    pub nested_stderr: f64,
    /// `global − nested`.
    pub discrepancy: f64,
    /// `sqrt(global_stderr² + nested_stderr²)`.
    pub error_bar: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FkReport {
    pub points: Vec<FkPoint>,
    pub max_abs_discrepancy: f64,
    pub mean_abs_discrepancy: f64,
    /// Mean signed discrepancy, an estimate of the regression bias.
    pub mean_discrepancy: f64,
    /// Root mean square discrepancy.
    pub rms_discrepancy: f64,
    /// Points with `|discrepancy| > k · error_bar` for the requested `k`.
    pub violations: usize,
}

/// Settings of a Feynman–Kac check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FkOptions {
    /// Inner paths per point, split evenly over the replicates.
    pub inner: MonteCarlo,
    /// Independent inner batches per point. With two or more, the nested
    /// error bar is the standard error across replicates, which includes the
    /// inner regression noise.
    pub replicates: usize,
    /// Violation threshold in error bars.
    pub k: f64,
    /// Upper bound on the total number of inner paths.
    pub cap: usize,
}

impl Default for FkOptions {
    fn default() -> Self {
        Self {
            inner: MonteCarlo { paths: 20_000, seed: 1 },
            replicates: 8,
            k: 3.0,
            cap: 10_000_000,
        }
    }
}

/// Compares the global solution `bwd` with nested restarts at the sampled
/// `(path, index)` points. Replicate `r` of point `q` uses the seed
/// `derive_seed(derive_seed(seed, q), r)`.
#[allow(clippy::too_many_arguments)]
pub fn fk_check(
    coeffs: &CoefficientSet,
    fwd: &ForwardSolution,
    bw: &BrownianBatch,
    bwd: &BackwardSolution,
    sample: &[(usize, usize)],
    fk: &FkOptions,
    opts: &BackwardOptions,
) -> Result<FkReport> {
    let mc = fk.inner;
    let (k, cap) = (fk.k, fk.cap);
    let reps = fk.replicates.max(1);
    let requested = sample.len().saturating_mul(mc.paths);
    if requested > cap {
        return Err(Error::BudgetExceeded { requested, cap });
    }
    let grid = fwd.grid;
    let mut points = Vec::with_capacity(sample.len());
    for (q, &(p, i)) in sample.iter().enumerate() {
        if p >= fwd.n_paths() || i > grid.steps() {
            return Err(Error::InvalidParameter(format!("sample point ({p}, {i}) out of range")));
        }
        let x = crate::forward::concat_path(fwd, bw, p, i)?;
        let point_seed = derive_seed(mc.seed, q as u64);
        let mut us = Vec::with_capacity(reps);
        let mut last_se = 0.0;
        for r in 0..reps {
            let inner = MonteCarlo {
                paths: (mc.paths / reps).max(2),
                seed: if reps == 1 { point_seed } else { derive_seed(point_seed, r as u64) },
            };
            let u = eval_u(coeffs, &grid, i, i, &x, inner, opts)?;
            last_se = u.stderr;
            us.push(u.estimate);
        }
        let (nested, nested_stderr) = if reps == 1 { (us[0], last_se) } else { exec::mean_stderr(&us) };
        let global = bwd.y.get(p, i);
        let global_stderr = bwd.y_stderr.as_ref().map_or(0.0, |se| se.get(p, i));
        points.push(FkPoint {
            path: p,
            i,
            global,
            global_stderr,
            nested,
            nested_stderr,
            discrepancy: global - nested,
            error_bar: global_stderr.hypot(nested_stderr),
        });
    }
    let n = points.len().max(1) as f64;
    Ok(FkReport {
        max_abs_discrepancy: points.iter().fold(0.0, |a, q| a.max(q.discrepancy.abs())),
        mean_abs_discrepancy: points.iter().map(|q| q.discrepancy.abs()).sum::<f64>() / n,
        mean_discrepancy: points.iter().map(|q| q.discrepancy).sum::<f64>() / n,
        rms_discrepancy: (points.iter().map(|q| q.discrepancy * q.discrepancy).sum::<f64>() / n).sqrt(),
        violations: points
            .iter()
            .filter(|q| q.discrepancy.abs() > k * q.error_bar)
            .count(),
        points,
    })
}

/// Linear equation for `∇Ỹ` along a frozen restart.
struct VariationalProblem<'a> {
    w: &'a DerivativeWeights,
    r: &'a Restart,
    grad: &'a Variation,
    times: Vec<f64>,
}

impl VariationalProblem<'_> {
    fn base_z(&self, i: usize, k: usize, p: usize) -> f64 {
        if self.w.driver_affine {
            return 0.0;
        }
        let e = &self.r.bwd.extras[0];
        if i == e.param {
            e.trajectory.as_ref().expect("tracked").1.get(p, k)
        } else {
            self.r.bwd.z.as_ref().expect("stored").get(p, i, k).expect("in region")
        }
    }

    fn base_y(&self, k: usize, p: usize) -> f64 {
        self.r.bwd.y.get(p, k)
    }
}

impl SweepProblem for VariationalProblem<'_> {
    fn terminal(&self, i: usize, p: usize) -> f64 {
        let x = self.r.fwd.x.path(p);
        let view = PathView::new(x, self.r.bw.levels_of(p), self.r.fwd.grid.dt());
        let wts = self.w.dg_weights(self.times[i], &view);
        let g = self.grad.grad_x.path(p);
        wts.iter().zip(g).map(|(a, b)| a * b).sum()
    }

    fn driver(&self, i: usize, r: usize, p: usize, y: f64, z: f64, _: Option<f64>) -> f64 {
        let (ti, tr) = (self.times[i], self.times[r]);
        let x = self.r.fwd.x.get(p, r);
        let (yb, zb) = (self.base_y(r, p), self.base_z(i, r, p));
        (self.w.df_x)(ti, tr, x, yb, zb) * self.grad.grad_x.get(p, r)
            + (self.w.df_y)(ti, tr, x, yb, zb) * y
            + (self.w.df_z)(ti, tr, x, yb, zb) * z
    }

    fn type2(&self) -> bool {
        false
    }
}

/// Settings of the finite-difference estimator.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FiniteDifference {
    /// Step; `None` selects `10⁻⁴ (1 + max |x|)`.
    pub eps: Option<f64>,
}

/// Mean and standard error of one estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    fn of(samples: &[f64]) -> Self {
        let (value, stderr) = exec::mean_stderr(samples);
        Self { value, stderr }
    }
}

/// Three estimates of `⟨∂ₓU(t, s, x), η⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeEstimate {
    /// `η` with the nodes before `s` cleared.
    pub eta: Vec<f64>,
    pub variational: Estimate,
    pub finite_difference: Estimate,
    /// Finite difference with half the step.
    pub finite_difference_half: Estimate,
    pub eps: f64,
    pub resolvent: Estimate,
    /// `|variational − finite_difference|`.
    pub var_fd: f64,
    /// `|variational − resolvent|`.
    pub var_res: f64,
    /// `|finite_difference − resolvent|`.
    pub fd_res: f64,
}

impl DerivativeEstimate {
    /// Halving the step moves the estimate by less than its error bar.
    pub fn richardson_ok(&self) -> bool {
        let bar = self
            .finite_difference
            .stderr
            .max(1e-9 * (1.0 + self.finite_difference.value.abs()));
        (self.finite_difference.value - self.finite_difference_half.value).abs() < bar
    }

    /// All pairwise gaps within `max(rel · |reference|, k · stderr)`, where
    /// the reference is the variational value and the error bar combines
    /// the two estimators involved.
    pub fn agrees(&self, rel: f64, k: f64) -> bool {
        let tol = |a: &Estimate, b: &Estimate| (rel * self.variational.value.abs()).max(k * a.stderr.hypot(b.stderr));
        let (v, f, r) = (&self.variational, &self.finite_difference, &self.resolvent);
        self.var_fd <= tol(v, f) && self.var_res <= tol(v, r) && self.fd_res <= tol(f, r)
    }
}

/// Variational estimate alone, along an already restarted system.
fn variational_samples(
    w: &DerivativeWeights,
    r: &Restart,
    t: usize,
    s: usize,
    eta: &[f64],
    opts: &BackwardOptions,
) -> Result<(Variation, Vec<f64>)> {
    let grid = r.fwd.grid;
    let grad = simulate_variational(w, &r.fwd, eta, s, &r.bw, false)?;
    let problem = VariationalProblem {
        w,
        r,
        grad: &grad,
        times: grid.nodes(),
    };
    let mut o = *opts;
    o.store_fields = false;
    o.track_extras = false;
    o.diag_stderr = false;
    o.implicit = false;
    let samples = if s == grid.steps() {
        exec::map_indexed(r.fwd.n_paths(), |p| problem.terminal(t, p))
    } else {
        let vb = sweep(&problem, &r.fwd, &r.bw, s + 1, &[t], &o)?;
        last_step(&problem, &vb, t, s, grid.dt())
    };
    Ok((grad, samples))
}

/// `⟨∂ₓU(t, s, x), η⟩` by the variational estimator only.
#[allow(clippy::too_many_arguments)]
pub fn variational_derivative(
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    t: usize,
    s: usize,
    x: &[f64],
    eta: &[f64],
    mc: MonteCarlo,
    opts: &BackwardOptions,
) -> Result<Estimate> {
    check_indices(grid, t, s, x)?;
    let w = derivative_weights(coeffs)?;
    let eta = masked(eta, s, grid)?;
    let r = if s == grid.steps() {
        frozen_terminal(coeffs, grid, x, mc)?
    } else {
        restart(coeffs, grid, t, s, x, mc, opts, true, true)?
    };
    Ok(Estimate::of(&variational_samples(w, &r, t, s, &eta, opts)?.1))
}

fn masked(eta: &[f64], s: usize, grid: &TimeGrid) -> Result<Vec<f64>> {
    if eta.len() != grid.n_nodes() {
        return Err(Error::Dimension(format!(
            "direction has {} nodes, grid has {}",
            eta.len(),
            grid.n_nodes()
        )));
    }
    let mut e = eta.to_vec();
    e[..s].iter_mut().for_each(|v| *v = 0.0);
    Ok(e)
}

/// Restart at `s = N`: no sweep, `X = x`.
fn frozen_terminal(coeffs: &CoefficientSet, grid: &TimeGrid, x: &[f64], mc: MonteCarlo) -> Result<Restart> {
    let bw = BrownianBatch::sample(grid, mc.paths, 1, mc.seed, false)?;
    let fwd = simulate_from(coeffs, grid, &bw, x, grid.steps(), ForwardOptions::default())?;
    let nn = grid.n_nodes();
    let bwd = BackwardSolution {
        grid: *grid,
        start: grid.steps(),
        y: PathBatch::zeros(mc.paths, nn),
        mean_y: vec![0.0; nn],
        stderr_y: vec![0.0; nn],
        ytilde: None,
        z: None,
        z2: None,
        extras: Vec::new(),
        martingale_residual: vec![f64::NAN; nn],
        y_stderr: None,
        diagnostics: Vec::new(),
    };
    Ok(Restart { bw, fwd, bwd })
}

/// Resolvent representation
/// `E[ξ_t + Σ_{j>s} Γ(t, j) ξ_j Δ]` with
/// `ξ_l = M^l_N Dg(t_l)·∇X + Σ_{r>l∨s} M^l_r ∂ₓf(t_l, t_r) ∇X_r Δ`,
/// `K₁(l, r) = M^l_r ∂_y f(t_l, t_r)` and
/// `M^l_r = Π_{l∨s<q<r} exp(β_q ΔW_q − ½ β_q² Δ)`, `β_q = ∂_z f(t_l, t_q)`.
/// The resolvent sum is accumulated as `u_l = Σ_{r>l∨s} K₁(l, r)(ξ_r + u_r) Δ`.
fn resolvent_samples(w: &DerivativeWeights, r: &Restart, grad: &Variation, t: usize, s: usize) -> Vec<f64> {
    let grid = r.fwd.grid;
    let nn = grid.n_nodes();
    let dt = grid.dt();
    let times = grid.nodes();
    let problem = VariationalProblem {
        w,
        r,
        grad,
        times: times.clone(),
    };
    exec::map_indexed(r.fwd.n_paths(), |p| {
        let x = r.fwd.x.path(p);
        let g = grad.grad_x.path(p);
        let dw = r.bw.increments_of(p);
        let mut xi = vec![0.0; nn];
        let mut u = vec![0.0; nn];
        let mut m = vec![0.0; nn];
        let eval = |l: usize, m: &mut [f64], xi: &[f64], u: &[f64]| -> (f64, f64) {
            let lo = l.max(s);
            // m[r] = M^l_r for r > lo.
            let mut acc = 1.0;
            for q in lo + 1..nn {
                m[q] = acc;
                if q + 1 < nn {
                    let (yb, zb) = (problem.base_y(q, p), problem.base_z(l, q, p));
                    let b = (w.df_z)(times[l], times[q], x[q], yb, zb);
                    if b != 0.0 {
                        acc *= (b * dw[q] - 0.5 * b * b * dt).exp();
                    }
                }
            }
            let m_end = if lo + 1 < nn { m[nn - 1] } else { 1.0 };
            let mut xl = m_end * problem.terminal(l, p);
            let mut ul = 0.0;
            for q in lo + 1..nn {
                let (yb, zb) = (problem.base_y(q, p), problem.base_z(l, q, p));
                xl += m[q] * (w.df_x)(times[l], times[q], x[q], yb, zb) * g[q] * dt;
                ul += m[q] * (w.df_y)(times[l], times[q], x[q], yb, zb) * (xi[q] + u[q]) * dt;
            }
            (xl, ul)
        };
        for l in (s + 1..nn).rev() {
            let (a, b) = eval(l, &mut m, &xi, &u);
            xi[l] = a;
            u[l] = b;
        }
        let (a, b) = eval(t, &mut m, &xi, &u);
        a + b
    })
}

/// Variational, finite-difference and resolvent estimates of
/// `⟨∂ₓU(t, s, x), η⟩`. Nodes of `η` before `s` are ignored. All three
/// share the batch seeded with `mc.seed`.
#[allow(clippy::too_many_arguments)]
pub fn path_derivative(
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    t: usize,
    s: usize,
    x: &[f64],
    eta: &[f64],
    mc: MonteCarlo,
    opts: &BackwardOptions,
    fd: FiniteDifference,
) -> Result<DerivativeEstimate> {
    check_indices(grid, t, s, x)?;
    let w = derivative_weights(coeffs)?;
    let eta = masked(eta, s, grid)?;
    let r = if s == grid.steps() {
        frozen_terminal(coeffs, grid, x, mc)?
    } else {
        restart(coeffs, grid, t, s, x, mc, opts, true, true)?
    };
    let (grad, var) = variational_samples(w, &r, t, s, &eta, opts)?;
    let res = resolvent_samples(w, &r, &grad, t, s);

    let scale = 1.0 + x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let eps = fd.eps.unwrap_or(1e-4 * scale);
    if !(eps > 0.0) || !(eps * scale).is_finite() || eps < f64::EPSILON * scale {
        return Err(Error::InvalidParameter(format!("finite-difference step {eps} underflows")));
    }
    let central = |h: f64| -> Result<Estimate> {
        let shifted = |sign: f64| -> Result<Vec<f64>> {
            let xs: Vec<f64> = x.iter().zip(&eta).map(|(a, e)| a + sign * h * e).collect();
            if s == grid.steps() {
                Ok(vec![terminal_value(coeffs, grid, t, &xs); mc.paths])
            } else {
                u_targets(coeffs, grid, t, s, &xs, mc, opts)
            }
        };
        let (up, down) = (shifted(1.0)?, shifted(-1.0)?);
        let d: Vec<f64> = up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        Ok(Estimate::of(&d))
    };
    let fdv = central(eps)?;
    let fdh = central(0.5 * eps)?;
    let (variational, resolvent) = (Estimate::of(&var), Estimate::of(&res));
    Ok(DerivativeEstimate {
        eta,
        var_fd: (variational.value - fdv.value).abs(),
        var_res: (variational.value - resolvent.value).abs(),
        fd_res: (fdv.value - resolvent.value).abs(),
        variational,
        finite_difference: fdv,
        finite_difference_half: fdh,
        eps,
        resolvent,
    })
}

/// Result of the coupled Picard iteration.
#[derive(Debug, Clone)]
pub struct CoupledSolution {
    pub forward: ForwardSolution,
    pub backward: BackwardSolution,
    /// `‖y⁽ᵐ⁺¹⁾ − y⁽ᵐ⁾‖` per iteration.
    pub gaps: Vec<f64>,
    pub converged: bool,
}

impl CoupledSolution {
    /// Successive gap ratios.
    pub fn ratios(&self) -> Vec<f64> {
        self.gaps.windows(2).map(|w| w[1] / w[0]).collect()
    }
}

/// `sqrt(Σ_k Δ E[(a_k − b_k)²])` over all paths.
fn grid_gap(a: &PathBatch, b: &PathBatch, dt: f64) -> f64 {
    let d: Vec<f64> = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .collect();
    (exec::ordered_sum(&d) * dt / a.n_paths() as f64).sqrt()
}

/// Whole-interval Picard iteration for a coupled system, starting from
/// `y⁽⁰⁾ = 0`. Stops when the gap drops below `tol`. Three consecutive
/// growing gaps, a non-finite iterate, or `max_iter` iterations without a
/// decreasing gap are reported as [`Error::NoContraction`].
pub fn solve_coupled(
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    bw: &BrownianBatch,
    x0: &[f64],
    opts: &BackwardOptions,
    tol: f64,
    max_iter: usize,
) -> Result<CoupledSolution> {
    let mut y = PathBatch::zeros(bw.n_paths(), grid.n_nodes());
    let mut gaps: Vec<f64> = Vec::new();
    let mut growth = 0;
    let diverged = |gaps: &[f64]| Error::NoContraction {
        iterations: gaps.len(),
        last_gaps: gaps.to_vec(),
    };
    for _ in 0..max_iter {
        let step = simulate_coupled(coeffs, grid, bw, x0, &y, ForwardOptions::default())
            .and_then(|fwd| solve_type1(coeffs, &fwd, bw, opts).map(|bwd| (fwd, bwd)));
        let (fwd, bwd) = match step {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => {
                gaps.push(f64::INFINITY);
                return Err(diverged(&gaps));
            }
            Err(e) => return Err(e),
        };
        let gap = grid_gap(&bwd.y, &y, grid.dt());
        if !gap.is_finite() {
            gaps.push(gap);
            return Err(diverged(&gaps));
        }
        growth = match gaps.last() {
            Some(&prev) if gap > prev => growth + 1,
            _ => 0,
        };
        gaps.push(gap);
        if gap < tol {
            return Ok(CoupledSolution {
                forward: fwd,
                backward: bwd,
                gaps,
                converged: true,
            });
        }
        if growth >= 3 {
            return Err(diverged(&gaps));
        }
        y = bwd.y.clone();
        if gaps.len() == max_iter {
            let decreasing = gaps.len() >= 2 && gaps[gaps.len() - 1] < gaps[gaps.len() - 2];
            if !decreasing {
                return Err(diverged(&gaps));
            }
            return Ok(CoupledSolution {
                forward: fwd,
                backward: bwd,
                gaps,
                converged: false,
            });
        }
    }
    Err(diverged(&gaps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{builtin, Params};
    use crate::forward::simulate;
    use crate::grid::{make_grid, sample_brownian};

    fn mc(paths: usize, seed: u64) -> MonteCarlo {
        MonteCarlo { paths, seed }
    }

    #[test]
    fn terminal_slice_is_exact() {
        let g = make_grid(1.0, 8).unwrap();
        let c = builtin("state-lipschitz", &Params::new()).unwrap();
        let x: Vec<f64> = (0..=8).map(|k| k as f64 * 0.1).collect();
        let u = eval_u(&c, &g, 3, 8, &x, mc(10, 1), &BackwardOptions::default()).unwrap();
        let zero = vec![0.0; 9];
        assert_eq!(u.estimate, (c.g)(g.t(3), &PathView::new(&x, &zero, g.dt())));
        assert_eq!(u.stderr, 0.0);
    }

    #[test]
    fn martingale_value_is_frozen_level() {
        let g = make_grid(1.0, 8).unwrap();
        let c = builtin("bm", &Params::new()).unwrap();
        let x: Vec<f64> = (0..=8).map(|k| (k as f64).sin()).collect();
        for (t, s) in [(0, 0), (2, 5), (5, 5), (7, 7)] {
            let u = eval_u(&c, &g, t, s, &x, mc(4000, 2), &BackwardOptions::default()).unwrap();
            // X_T = x_N + W_T − W_s, so U = x_N.
            assert!((u.estimate - x[8]).abs() <= 3.0 * u.stderr + 1e-12, "{t} {s}: {u:?}");
        }
    }

    #[test]
    fn future_free_terms_shift_u() {
        let g = make_grid(1.0, 8).unwrap();
        let c = builtin("bm", &Params::new()).unwrap();
        let x = vec![0.0; 9];
        let opts = BackwardOptions::default();
        let base = eval_u(&c, &g, 2, 4, &x, mc(2000, 3), &opts).unwrap();
        let mut past = x.clone();
        past[1] = 5.0;
        let p = eval_u(&c, &g, 2, 4, &past, mc(2000, 3), &opts).unwrap();
        assert!((p.estimate - base.estimate).abs() < 1e-12);
        let mut fut = x.clone();
        fut[8] = 1.0;
        let f = eval_u(&c, &g, 2, 4, &fut, mc(2000, 3), &opts).unwrap();
        assert!((f.estimate - base.estimate - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_indices() {
        let g = make_grid(1.0, 4).unwrap();
        let c = builtin("bm", &Params::new()).unwrap();
        let opts = BackwardOptions::default();
        assert!(eval_u(&c, &g, 3, 2, &[0.0; 5], mc(10, 0), &opts).is_err());
        assert!(eval_u(&c, &g, 0, 5, &[0.0; 5], mc(10, 0), &opts).is_err());
        assert!(eval_u(&c, &g, 0, 1, &[0.0; 4], mc(10, 0), &opts).is_err());
    }

    #[test]
    fn fk_terminal_points_agree_exactly() {
        let g = make_grid(1.0, 8).unwrap();
        let bw = sample_brownian(&g, 500, 1, 4).unwrap();
        let c = builtin("state-lipschitz", &Params::new()).unwrap();
        let fwd = simulate(&c, &g, &bw, &[0.0; 9], ForwardOptions::default()).unwrap();
        let bwd = solve_type1(&c, &fwd, &bw, &BackwardOptions::default()).unwrap();
        let fk = FkOptions {
            inner: mc(100, 5),
            replicates: 1,
            ..FkOptions::default()
        };
        let r = fk_check(&c, &fwd, &bw, &bwd, &[(0, 8), (7, 8)], &fk, &BackwardOptions::default()).unwrap();
        assert!(r.points.iter().all(|p| p.discrepancy.abs() < 1e-12));
    }

    #[test]
    fn fk_budget_is_enforced() {
        let g = make_grid(1.0, 4).unwrap();
        let bw = sample_brownian(&g, 100, 1, 4).unwrap();
        let c = builtin("bm", &Params::new()).unwrap();
        let fwd = simulate(&c, &g, &bw, &[0.0; 5], ForwardOptions::default()).unwrap();
        let bwd = solve_type1(&c, &fwd, &bw, &BackwardOptions::default()).unwrap();
        let fk = FkOptions {
            inner: mc(1000, 5),
            cap: 1500,
            ..FkOptions::default()
        };
        let err = fk_check(&c, &fwd, &bw, &bwd, &[(0, 1), (1, 2)], &fk, &BackwardOptions::default()).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { requested: 2000, cap: 1500 }));
    }

    #[test]
    fn fk_martingale_case() {
        let g = make_grid(1.0, 8).unwrap();
        let bw = sample_brownian(&g, 20_000, 1, 6).unwrap();
        let c = builtin("bm", &Params::new()).unwrap();
        let fwd = simulate(&c, &g, &bw, &[0.0; 9], ForwardOptions::default()).unwrap();
        let opts = BackwardOptions {
            diag_stderr: true,
            ..BackwardOptions::default()
        };
        let bwd = solve_type1(&c, &fwd, &bw, &opts).unwrap();
        let fk = FkOptions {
            inner: mc(8000, 7),
            ..FkOptions::default()
        };
        let r = fk_check(&c, &fwd, &bw, &bwd, &[(0, 2), (1, 4), (2, 6)], &fk, &opts).unwrap();
        for p in &r.points {
            assert!((p.nested - bw.level(p.path, p.i)).abs() <= 3.0 * p.nested_stderr, "{p:?}");
        }
        assert_eq!(r.violations, 0, "{r:?}");
    }

    #[test]
    fn derivative_of_martingale_terminal() {
        let g = make_grid(1.0, 8).unwrap();
        let c = builtin("bm", &Params::new()).unwrap();
        let x = vec![0.2; 9];
        let eta: Vec<f64> = (0..=8).map(|k| k as f64).collect();
        let d = path_derivative(&c, &g, 1, 3, &x, &eta, mc(2000, 8), &BackwardOptions::default(), FiniteDifference::default())
            .unwrap();
        for e in [d.variational, d.finite_difference, d.resolvent] {
            assert!((e.value - 8.0).abs() < 1e-9, "{d:?}");
        }
        assert_eq!(&d.eta[..3], &[0.0; 3]);
    }

    #[test]
    fn zero_direction_gives_zero() {
        let g = make_grid(1.0, 8).unwrap();
        let c = builtin("state-lipschitz", &Params::new()).unwrap();
        let d = path_derivative(&c, &g, 2, 4, &[0.1; 9], &[0.0; 9], mc(1000, 9), &BackwardOptions::default(), FiniteDifference::default())
            .unwrap();
        assert_eq!(d.variational.value, 0.0);
        assert_eq!(d.resolvent.value, 0.0);
        assert_eq!(d.finite_difference.value, 0.0);
    }

    #[test]
    fn estimators_agree_on_lipschitz_family() {
        let g = make_grid(1.0, 8).unwrap();
        let c = builtin("state-lipschitz", &Params::new()).unwrap();
        let x: Vec<f64> = (0..=8).map(|k| 0.3 * (k as f64 / 3.0).sin()).collect();
        let eta: Vec<f64> = (0..=8).map(|k| 1.0 + k as f64 / 8.0).collect();
        let d = path_derivative(&c, &g, 1, 2, &x, &eta, mc(20_000, 10), &BackwardOptions::default(), FiniteDifference::default())
            .unwrap();
        assert!(d.agrees(0.01, 3.0), "{d:?}");
        assert!(d.richardson_ok(), "{d:?}");
    }

    #[test]
    fn variational_scales_by_powers_of_two() {
        let g = make_grid(1.0, 8).unwrap();
        let c = builtin("state-lipschitz", &Params::new()).unwrap();
        let x = vec![0.1; 9];
        let eta: Vec<f64> = (0..=8).map(|k| (k as f64).cos()).collect();
        let opts = BackwardOptions::default();
        let a = variational_derivative(&c, &g, 1, 3, &x, &eta, mc(2000, 11), &opts).unwrap();
        let twice: Vec<f64> = eta.iter().map(|e| 2.0 * e).collect();
        let b = variational_derivative(&c, &g, 1, 3, &x, &twice, mc(2000, 11), &opts).unwrap();
        assert_eq!(b.value.to_bits(), (2.0 * a.value).to_bits());
    }

    #[test]
    fn requires_weights() {
        let g = make_grid(1.0, 4).unwrap();
        let mut c = builtin("zero", &Params::new()).unwrap();
        c.derivatives = None;
        let r = path_derivative(&c, &g, 0, 1, &[0.0; 5], &[1.0; 5], mc(10, 0), &BackwardOptions::default(), FiniteDifference::default());
        assert!(r.is_err());
    }

    #[test]
    fn decoupled_picard_stops_after_two_iterations() {
        let g = make_grid(1.0, 8).unwrap();
        let bw = sample_brownian(&g, 2000, 1, 12).unwrap();
        let c = builtin("coupled", &Params::new().with("kappa", 0.0)).unwrap();
        let sol = solve_coupled(&c, &g, &bw, &[0.0; 9], &BackwardOptions::default(), 1e-10, 20).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.gaps.len(), 2);
        assert_eq!(sol.gaps[1], 0.0);
    }

    #[test]
    fn small_coupling_contracts() {
        let g = make_grid(1.0, 8).unwrap();
        let bw = sample_brownian(&g, 2000, 1, 13).unwrap();
        let c = builtin("coupled", &Params::new().with("kappa", 0.2)).unwrap();
        let sol = solve_coupled(&c, &g, &bw, &[0.0; 9], &BackwardOptions::default(), 1e-9, 50).unwrap();
        assert!(sol.converged, "{:?}", sol.gaps);
        let ratios = sol.ratios();
        assert!(ratios.iter().skip(1).all(|&r| r < 0.5), "{ratios:?}");
    }

    #[test]
    fn large_coupling_reports_divergence() {
        let g = make_grid(1.0, 8).unwrap();
        let bw = sample_brownian(&g, 2000, 1, 14).unwrap();
        let c = builtin("coupled", &Params::new().with("kappa", 50.0)).unwrap();
        match solve_coupled(&c, &g, &bw, &[0.0; 9], &BackwardOptions::default(), 1e-9, 50) {
            Err(Error::NoContraction { last_gaps, .. }) => assert!(last_gaps.len() >= 2),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
