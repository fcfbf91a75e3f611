//! Explicit Euler scheme for the forward Volterra equation, together with the
//! two-time auxiliary field, restarts, concatenated paths and the
//! first-order variational system.
//!
//! Row `i` of the auxiliary field holds `X̃^{s_j}_{t_i}` for `j ≥ i`. The
//! scheme sweeps `i` upward and adds one increment per remaining column, so
//! the diagonal of row `i` is `X_{t_i}` and restarting from any row continues
//! the very same floating-point accumulation.

use crate::coefficients::{derivative_weights, CoefficientSet, DerivativeWeights, PathView};
use crate::error::{Error, Result};
use crate::exec;
use crate::grid::{BrownianBatch, PathBatch, Region, TimeGrid, TwoTimeField};

/// Default number of pivot columns recorded per auxiliary row.
pub const DEFAULT_PIVOTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    /// Number of pivot columns of each auxiliary row kept for regression.
    pub pivots: usize,
    /// Materialize the whole auxiliary field.
    pub store_full: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            pivots: DEFAULT_PIVOTS,
            store_full: false,
        }
    }
}

/// Geometric pivot columns of row `i`: `i + max(1, round((N − i)^{m/P}))`
/// for `m = 1..=P`, clamped to `N`.
pub fn pivot_nodes(steps: usize, i: usize, pivots: usize) -> Vec<usize> {
    let rem = (steps - i) as f64;
    (1..=pivots)
        .map(|m| {
            let off = rem.powf(m as f64 / pivots as f64).round().max(1.0) as usize;
            (i + off).min(steps)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ForwardSolution {
    pub grid: TimeGrid,
    pub seed: u64,
    /// Index from which the dynamics run; earlier nodes are frozen input.
    pub start: usize,
    pub x: PathBatch,
    /// Running trapezoid integral `∫_0^{t_k} X_r dr`.
    pub integral: PathBatch,
    /// Full auxiliary field, when requested. Rows before `start` hold only
    /// their diagonal.
    pub xtilde: Option<TwoTimeField>,
    pub n_pivots: usize,
    /// `pivot_values[(p (N+1) + i) P + m]` = `X̃^{s_{j_m(i)}}_{t_i}`.
    pub pivot_values: Vec<f64>,
    coeffs: CoefficientSet,
    init: InitialData,
    coupling: Option<PathBatch>,
}

#[derive(Debug, Clone)]
enum InitialData {
    /// Free term shared by all paths.
    Shared(Vec<f64>),
    /// Frozen path up to `start` and free term after, shared by all paths.
    Frozen(Vec<f64>),
}

impl ForwardSolution {
    pub fn n_paths(&self) -> usize {
        self.x.n_paths()
    }

    pub fn coefficients(&self) -> &CoefficientSet {
        &self.coeffs
    }

    /// Coupling input the forward equation was driven with.
    pub fn coupling(&self) -> Option<&PathBatch> {
        self.coupling.as_ref()
    }

    /// Pivot values of row `i` on path `p`.
    #[inline]
    pub fn pivots(&self, p: usize, i: usize) -> &[f64] {
        let o = (p * self.grid.n_nodes() + i) * self.n_pivots;
        &self.pivot_values[o..o + self.n_pivots]
    }

    /// Row `i` of the auxiliary field on path `p`: `X̃^{s_j}_{t_i}` for
    /// `j = i..=N`. Read from storage when materialized, otherwise recomputed
    /// with the identical accumulation.
    pub fn auxiliary_row(&self, bw: &BrownianBatch, p: usize, i: usize) -> Result<Vec<f64>> {
        let n = self.grid.steps();
        if i > n || p >= self.n_paths() {
            return Err(Error::InvalidParameter(format!(
                "row ({p}, {i}) outside {} paths × {} nodes",
                self.n_paths(),
                n + 1
            )));
        }
        if i < self.start {
            return Err(Error::InvalidParameter(format!(
                "row {i} precedes the restart index {}",
                self.start
            )));
        }
        if let Some(f) = &self.xtilde {
            return Ok(f.row(p, i).to_vec());
        }
        let stepper = Stepper::new(&self.coeffs, &self.grid);
        let mut out = Vec::new();
        let (past, row0) = self.initial_parts();
        stepper.run_path(
            p,
            self.start,
            past,
            row0,
            bw,
            self.coupling.as_ref().map(|y| y.path(p)),
            i,
            |r, row, _| {
                if r == i {
                    out = row.to_vec();
                }
            },
        )?;
        Ok(out)
    }

    fn initial_parts(&self) -> (&[f64], &[f64]) {
        match &self.init {
            InitialData::Shared(x0) => (&[], &x0[..]),
            InitialData::Frozen(x) => (&x[..self.start], &x[self.start..]),
        }
    }
}

/// Pre-evaluated `b, σ` for coefficients that depend on `(t, r)` only.
struct Table {
    b: Vec<f64>,
    s: Vec<f64>,
}

struct Stepper<'a> {
    coeffs: &'a CoefficientSet,
    grid: &'a TimeGrid,
    times: Vec<f64>,
    table: Option<Table>,
}

impl<'a> Stepper<'a> {
    fn new(coeffs: &'a CoefficientSet, grid: &'a TimeGrid) -> Self {
        let times = grid.nodes();
        let nn = grid.n_nodes();
        let table = if coeffs.meta.deterministic_forward && !coeffs.meta.coupled {
            let zeros = vec![0.0; nn];
            let mut b = vec![0.0; nn * nn];
            let mut s = vec![0.0; nn * nn];
            for j in 0..nn {
                for k in 0..j {
                    let v = PathView::new(&zeros[..=k], &zeros[..=k], grid.dt());
                    b[j * nn + k] = (coeffs.b)(times[j], times[k], &v);
                    s[j * nn + k] = (coeffs.sigma)(times[j], times[k], &v);
                }
            }
            Some(Table { b, s })
        } else {
            None
        };
        Self {
            coeffs,
            grid,
            times,
            table,
        }
    }

    /// Runs one path from row `start` up to row `last`, calling
    /// `visit(i, row_i, x)` after each row is complete. Returns `X`.
    #[allow(clippy::too_many_arguments)]
    fn run_path(
        &self,
        p: usize,
        start: usize,
        past: &[f64],
        row0: &[f64],
        bw: &BrownianBatch,
        y: Option<&[f64]>,
        last: usize,
        mut visit: impl FnMut(usize, &[f64], &[f64]),
    ) -> Result<Vec<f64>> {
        let nn = self.grid.n_nodes();
        let dt = self.grid.dt();
        let mut x = vec![0.0; nn];
        let mut cur = vec![0.0; nn];
        x[..start].copy_from_slice(past);
        cur[start..].copy_from_slice(row0);
        x[start] = cur[start];
        visit(start, &cur[start..], &x);
        let dws = bw.increments_of(p);
        let w = bw.levels_of(p);
        for i in start..last {
            let dw = dws[i];
            let ti = self.times[i];
            match &self.table {
                Some(tab) => {
                    for j in i + 1..nn {
                        let o = j * nn + i;
                        cur[j] += tab.b[o] * dt + tab.s[o] * dw;
                    }
                }
                None => {
                    let view = PathView {
                        x: &x[..=i],
                        w: &w[..=i],
                        y: y.map(|y| &y[..=i]),
                        dt,
                    };
                    for j in i + 1..nn {
                        let tj = self.times[j];
                        let b = (self.coeffs.b)(tj, ti, &view);
                        let s = (self.coeffs.sigma)(tj, ti, &view);
                        cur[j] += b * dt + s * dw;
                    }
                }
            }
            for (j, v) in cur.iter().enumerate().skip(i + 1) {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        what: "forward state",
                        path: p,
                        i: i + 1,
                        j,
                    });
                }
            }
            x[i + 1] = cur[i + 1];
            visit(i + 1, &cur[i + 1..], &x);
        }
        Ok(x)
    }
}

struct PathOutput {
    x: Vec<f64>,
    pivots: Vec<f64>,
    block: Vec<f64>,
}

fn check_len(name: &str, v: &[f64], expect: usize) -> Result<()> {
    if v.len() != expect {
        return Err(Error::Dimension(format!(
            "{name} has {} nodes, grid has {expect}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter(format!("{name} has non-finite entries")));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run(
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    bw: &BrownianBatch,
    start: usize,
    init: InitialData,
    row_source: Option<&ForwardSolution>,
    coupling: Option<&PathBatch>,
    opts: ForwardOptions,
) -> Result<ForwardSolution> {
    bw.require_scalar()?;
    if bw.grid() != grid {
        return Err(Error::Dimension("Brownian batch was drawn on a different grid".into()));
    }
    let n_paths = bw.n_paths();
    if let Some(y) = coupling {
        if y.n_paths() != n_paths || y.n_nodes() != grid.n_nodes() {
            return Err(Error::Dimension("coupling input does not match the batch".into()));
        }
    }
    let nn = grid.n_nodes();
    let np = opts.pivots;
    let pivot_table: Vec<Vec<usize>> = (0..nn).map(|i| pivot_nodes(grid.steps(), i, np)).collect();
    let stepper = Stepper::new(coeffs, grid);
    let tri = nn * (nn + 1) / 2;
    let shape = TwoTimeField::new(Region::Upper, nn, 0);
    let (past_shared, row_shared): (Vec<f64>, Vec<f64>) = match &init {
        InitialData::Shared(x0) => (Vec::new(), x0.clone()),
        InitialData::Frozen(x) => (x[..start].to_vec(), x[start..].to_vec()),
    };

    let outputs: Vec<Result<PathOutput>> = exec::map_indexed(n_paths, |p| {
        let own_row;
        let own_past;
        let (past, row0): (&[f64], &[f64]) = match row_source {
            Some(src) => {
                own_row = src.auxiliary_row(bw, p, start)?;
                own_past = src.x.path(p)[..start].to_vec();
                (&own_past, &own_row)
            }
            None => (&past_shared, &row_shared),
        };
        let mut pivots = vec![0.0; nn * np];
        let mut block = if opts.store_full { vec![0.0; tri] } else { Vec::new() };
        let x = stepper.run_path(
            p,
            start,
            past,
            row0,
            bw,
            coupling.map(|y| y.path(p)),
            grid.steps(),
            |i, row, _| {
                for (m, &j) in pivot_table[i].iter().enumerate() {
                    pivots[i * np + m] = row[j - i];
                }
                if opts.store_full {
                    let o = shape.local_offset(i, i);
                    block[o..o + row.len()].copy_from_slice(row);
                }
            },
        )?;
        for i in 0..start {
            for (m, &j) in pivot_table[i].iter().enumerate() {
                pivots[i * np + m] = x[j.min(start)];
            }
            if opts.store_full {
                block[shape.local_offset(i, i)] = x[i];
            }
        }
        Ok(PathOutput { x, pivots, block })
    });

    let mut x = PathBatch::zeros(n_paths, nn);
    let mut pivot_values = vec![0.0; n_paths * nn * np];
    let mut xtilde = opts.store_full.then(|| TwoTimeField::new(Region::Upper, nn, n_paths));
    for (p, out) in outputs.into_iter().enumerate() {
        let out = out?;
        x.path_mut(p).copy_from_slice(&out.x);
        pivot_values[p * nn * np..(p + 1) * nn * np].copy_from_slice(&out.pivots);
        if let Some(f) = xtilde.as_mut() {
            f.path_block_mut(p).copy_from_slice(&out.block);
        }
    }
    let init = match row_source {
        Some(src) => src.init.clone(),
        None => init,
    };
    let integral = running_integral(&x, grid.dt());
    Ok(ForwardSolution {
        grid: *grid,
        seed: bw.seed(),
        start: row_source.map_or(start, |s| s.start),
        x,
        integral,
        xtilde,
        n_pivots: np,
        pivot_values,
        coeffs: coeffs.clone(),
        init,
        coupling: coupling.cloned(),
    })
}

fn running_integral(x: &PathBatch, dt: f64) -> PathBatch {
    let mut out = PathBatch::zeros(x.n_paths(), x.n_nodes());
    for p in 0..x.n_paths() {
        let (src, dst) = (x.path(p), out.path_mut(p));
        for k in 1..src.len() {
            dst[k] = dst[k - 1] + 0.5 * (src[k - 1] + src[k]) * dt;
        }
    }
    out
}

/// Simulates `X` and the auxiliary field from the free term `x0` (one value
/// per grid node).
pub fn simulate(
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    bw: &BrownianBatch,
    x0: &[f64],
    opts: ForwardOptions,
) -> Result<ForwardSolution> {
    check_len("x0", x0, grid.n_nodes())?;
    if coeffs.meta.coupled {
        return Err(Error::InvalidParameter(format!(
            "'{}' reads the backward solution; use simulate_coupled",
            coeffs.name
        )));
    }
    run(coeffs, grid, bw, 0, InitialData::Shared(x0.to_vec()), None, None, opts)
}

/// As [`simulate`], feeding `y` (one path per Brownian path) to coefficients
/// that read the backward diagonal.
pub fn simulate_coupled(
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    bw: &BrownianBatch,
    x0: &[f64],
    y: &PathBatch,
    opts: ForwardOptions,
) -> Result<ForwardSolution> {
    check_len("x0", x0, grid.n_nodes())?;
    run(coeffs, grid, bw, 0, InitialData::Shared(x0.to_vec()), None, Some(y), opts)
}

/// Restarted dynamics with frozen input `x`: `X = x` on nodes `≤ s`, and for
/// `l > s`, `X_l = x_l + Σ_{s≤k<l} [b(t_l, t_k, X) Δ + σ(t_l, t_k, X) ΔW_k]`.
/// Only increments from index `s` on are used.
pub fn simulate_from(
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    bw: &BrownianBatch,
    x: &[f64],
    s: usize,
    opts: ForwardOptions,
) -> Result<ForwardSolution> {
    check_len("x", x, grid.n_nodes())?;
    if s > grid.steps() {
        return Err(Error::InvalidParameter(format!(
            "restart index {s} exceeds N = {}",
            grid.steps()
        )));
    }
    if coeffs.meta.coupled {
        return Err(Error::Unsupported("restarts of coupled systems".into()));
    }
    run(coeffs, grid, bw, s, InitialData::Frozen(x.to_vec()), None, None, opts)
}

/// Re-runs the scheme from row `i` of `sol`'s auxiliary field with the same
/// increments and returns the resulting `X`.
pub fn restart(sol: &ForwardSolution, i: usize, bw: &BrownianBatch) -> Result<PathBatch> {
    if i > sol.grid.steps() {
        return Err(Error::InvalidParameter(format!(
            "restart index {i} exceeds N = {}",
            sol.grid.steps()
        )));
    }
    if i < sol.start {
        return Err(Error::InvalidParameter(format!(
            "restart index {i} precedes the solution's own start {}",
            sol.start
        )));
    }
    let opts = ForwardOptions {
        pivots: sol.n_pivots,
        store_full: false,
    };
    let out = run(
        &sol.coeffs,
        &sol.grid,
        bw,
        i,
        InitialData::Shared(Vec::new()),
        Some(sol),
        sol.coupling.as_ref(),
        opts,
    )?;
    Ok(out.x)
}

/// Concatenated path `X̂^{t_i}`: `X` on nodes `< i`, row `i` of the
/// auxiliary field on nodes `≥ i`.
pub fn concat(sol: &ForwardSolution, bw: &BrownianBatch, i: usize) -> Result<PathBatch> {
    if i > sol.grid.steps() {
        return Err(Error::InvalidParameter(format!(
            "concatenation index {i} exceeds N = {}",
            sol.grid.steps()
        )));
    }
    let nn = sol.grid.n_nodes();
    let rows: Vec<Result<Vec<f64>>> = exec::map_indexed(sol.n_paths(), |p| {
        let mut out = sol.x.path(p)[..i].to_vec();
        out.extend(sol.auxiliary_row(bw, p, i)?);
        Ok(out)
    });
    let mut values = Vec::with_capacity(sol.n_paths() * nn);
    for r in rows {
        values.extend(r?);
    }
    PathBatch::from_vec(sol.n_paths(), nn, values)
}

/// Single-path concatenation `X̂^{t_i}(p)`.
pub fn concat_path(sol: &ForwardSolution, bw: &BrownianBatch, p: usize, i: usize) -> Result<Vec<f64>> {
    let mut out = sol.x.path(p)[..i].to_vec();
    out.extend(sol.auxiliary_row(bw, p, i)?);
    Ok(out)
}

/// First-order variations along a simulated solution.
#[derive(Debug, Clone)]
pub struct Variation {
    pub start: usize,
    /// `∇X`, zero before `start`.
    pub grad_x: PathBatch,
    /// `∇X̃` on rows `≥ start`, when requested.
    pub grad_xtilde: Option<TwoTimeField>,
}

/// Solves `∇X_l = η_l + Σ_{s≤k<l} [∂ₓb(t_l, t_k, X_k) Δ + ∂ₓσ(t_l, t_k, X_k) ΔW_k] ∇X_k`
/// for `l ≥ s` along `sol` with the same increments.
pub fn simulate_variational(
    weights: &DerivativeWeights,
    sol: &ForwardSolution,
    eta: &[f64],
    s: usize,
    bw: &BrownianBatch,
    store_field: bool,
) -> Result<Variation> {
    let grid = sol.grid;
    let nn = grid.n_nodes();
    check_len("η", eta, nn)?;
    if s > grid.steps() {
        return Err(Error::InvalidParameter(format!("start index {s} exceeds N")));
    }
    let dt = grid.dt();
    let times = grid.nodes();
    let tri = nn * (nn + 1) / 2;
    let shape = TwoTimeField::new(Region::Upper, nn, 0);
    let outputs: Vec<(Vec<f64>, Vec<f64>)> = exec::map_indexed(sol.n_paths(), |p| {
        let x = sol.x.path(p);
        let dws = bw.increments_of(p);
        let mut g = vec![0.0; nn];
        let mut cur = vec![0.0; nn];
        cur[s..].copy_from_slice(&eta[s..]);
        let mut block = if store_field { vec![0.0; tri] } else { Vec::new() };
        let record = |i: usize, cur: &[f64], block: &mut Vec<f64>| {
            if store_field {
                let o = shape.local_offset(i, i);
                block[o..o + nn - i].copy_from_slice(&cur[i..]);
            }
        };
        g[s] = cur[s];
        record(s, &cur, &mut block);
        for i in s..grid.steps() {
            let (ti, xi, dw, gi) = (times[i], x[i], dws[i], g[i]);
            for j in i + 1..nn {
                let tj = times[j];
                cur[j] += ((weights.db)(tj, ti, xi) * dt + (weights.dsigma)(tj, ti, xi) * dw) * gi;
            }
            g[i + 1] = cur[i + 1];
            record(i + 1, &cur, &mut block);
        }
        (g, block)
    });
    let mut grad_x = PathBatch::zeros(sol.n_paths(), nn);
    let mut field = store_field.then(|| TwoTimeField::new(Region::Upper, nn, sol.n_paths()));
    for (p, (g, block)) in outputs.into_iter().enumerate() {
        grad_x.path_mut(p).copy_from_slice(&g);
        if let Some(f) = field.as_mut() {
            f.path_block_mut(p).copy_from_slice(&block);
        }
    }
    if !grad_x.all_finite() {
        return Err(Error::NonFinite {
            what: "variation",
            path: 0,
            i: s,
            j: s,
        });
    }
    Ok(Variation {
        start: s,
        grad_x,
        grad_xtilde: field,
    })
}

/// [`simulate_variational`] with the coefficient set's own weights.
pub fn simulate_variational_for(
    coeffs: &CoefficientSet,
    sol: &ForwardSolution,
    eta: &[f64],
    s: usize,
    bw: &BrownianBatch,
    store_field: bool,
) -> Result<Variation> {
    let w = derivative_weights(coeffs)?;
    simulate_variational(w, sol, eta, s, bw, store_field)
}

/// Empirical moment bound `E[sup_k |X_{t_k}|²]` and its ratio to
/// `1 + max_k |x0_k|²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentReport {
    pub sup_second_moment: f64,
    pub constant: f64,
}

pub fn moment_report(sol: &ForwardSolution, x0: &[f64]) -> MomentReport {
    let sups = exec::map_indexed(sol.n_paths(), |p| {
        sol.x.path(p).iter().fold(0.0f64, |m, v| m.max(v * v))
    });
    let (m, _) = exec::mean_stderr(&sups);
    let norm = x0.iter().fold(0.0f64, |a, v| a.max(v * v));
    MomentReport {
        sup_second_moment: m,
        constant: m / (1.0 + norm),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{builtin, Params};
    use crate::grid::{make_grid, sample_brownian};

    fn full() -> ForwardOptions {
        ForwardOptions {
            store_full: true,
            ..ForwardOptions::default()
        }
    }

    #[test]
    fn pivots_are_geometric_and_clamped() {
        assert_eq!(pivot_nodes(64, 0, 4), vec![3, 8, 23, 64]);
        assert_eq!(pivot_nodes(64, 63, 4), vec![64, 64, 64, 64]);
        assert_eq!(pivot_nodes(64, 64, 4), vec![64, 64, 64, 64]);
    }

    #[test]
    fn zero_coefficients_keep_free_term() {
        let g = make_grid(1.0, 8).unwrap();
        let bw = sample_brownian(&g, 5, 1, 1).unwrap();
        let x0: Vec<f64> = (0..9).map(|k| k as f64 * 0.5 - 1.0).collect();
        let c = builtin("zero", &Params::new()).unwrap();
        let sol = simulate(&c, &g, &bw, &x0, full()).unwrap();
        let f = sol.xtilde.as_ref().unwrap();
        for p in 0..5 {
            assert_eq!(sol.x.path(p), &x0[..]);
            for i in 0..9 {
                for j in i..9 {
                    assert_eq!(f.get(p, i, j).unwrap(), x0[j]);
                }
            }
        }
    }

    #[test]
    fn brownian_telescopes() {
        let g = make_grid(1.0, 16).unwrap();
        let bw = sample_brownian(&g, 7, 1, 2).unwrap();
        let c = builtin("bm", &Params::new()).unwrap();
        let sol = simulate(&c, &g, &bw, &[0.0; 17], full()).unwrap();
        for p in 0..7 {
            let mut w = 0.0;
            for i in 0..16 {
                w += bw.dw(p, i);
                assert_eq!(sol.x.get(p, i + 1), w);
            }
        }
    }

    #[test]
    fn diagonal_identity_and_pivots() {
        let g = make_grid(1.0, 12).unwrap();
        let bw = sample_brownian(&g, 20, 1, 3).unwrap();
        let c = builtin("state-lipschitz", &Params::new()).unwrap();
        let x0 = vec![0.3; 13];
        let sol = simulate(&c, &g, &bw, &x0, full()).unwrap();
        let f = sol.xtilde.as_ref().unwrap();
        for p in 0..20 {
            for i in 0..13 {
                assert_eq!(sol.x.get(p, i).to_bits(), f.get(p, i, i).unwrap().to_bits());
                for (m, &j) in pivot_nodes(12, i, 4).iter().enumerate() {
                    assert_eq!(sol.pivots(p, i)[m], f.get(p, i, j).unwrap());
                }
            }
        }
    }

    #[test]
    fn streamed_rows_match_stored_rows() {
        let g = make_grid(1.0, 10).unwrap();
        let bw = sample_brownian(&g, 6, 1, 4).unwrap();
        let c = builtin("state-lipschitz", &Params::new()).unwrap();
        let x0 = vec![0.1; 11];
        let stored = simulate(&c, &g, &bw, &x0, full()).unwrap();
        let lean = simulate(&c, &g, &bw, &x0, ForwardOptions::default()).unwrap();
        assert_eq!(stored.x, lean.x);
        assert_eq!(stored.pivot_values, lean.pivot_values);
        for p in 0..6 {
            for i in 0..11 {
                assert_eq!(stored.auxiliary_row(&bw, p, i).unwrap(), lean.auxiliary_row(&bw, p, i).unwrap());
            }
        }
    }

    #[test]
    fn restart_at_ends() {
        let g = make_grid(1.0, 8).unwrap();
        let bw = sample_brownian(&g, 10, 1, 5).unwrap();
        let c = builtin("state-lipschitz", &Params::new()).unwrap();
        let sol = simulate(&c, &g, &bw, &[0.2; 9], ForwardOptions::default()).unwrap();
        assert_eq!(restart(&sol, 0, &bw).unwrap(), sol.x);
        assert_eq!(restart(&sol, 8, &bw).unwrap(), sol.x);
        assert!(restart(&sol, 9, &bw).is_err());
    }

    #[test]
    fn concat_definition() {
        let g = make_grid(1.0, 8).unwrap();
        let bw = sample_brownian(&g, 4, 1, 6).unwrap();
        let c = builtin("state-lipschitz", &Params::new()).unwrap();
        let sol = simulate(&c, &g, &bw, &[0.0; 9], full()).unwrap();
        assert_eq!(concat(&sol, &bw, 8).unwrap(), sol.x);
        let f = sol.xtilde.as_ref().unwrap();
        let h = concat(&sol, &bw, 3).unwrap();
        for p in 0..4 {
            for k in 0..9 {
                let expect = if k < 3 { sol.x.get(p, k) } else { f.get(p, 3, k).unwrap() };
                assert_eq!(h.get(p, k), expect);
            }
        }
        let z = builtin("zero", &Params::new()).unwrap();
        let x0: Vec<f64> = (0..9).map(|k| k as f64).collect();
        let sol = simulate(&z, &g, &bw, &x0, ForwardOptions::default()).unwrap();
        let h = concat(&sol, &bw, 0).unwrap();
        assert_eq!(h.path(2), &x0[..]);
    }

    #[test]
    fn frozen_restart_keeps_past() {
        let g = make_grid(1.0, 8).unwrap();
        let bw = sample_brownian(&g, 4, 1, 7).unwrap();
        let c = builtin("bm", &Params::new()).unwrap();
        let x: Vec<f64> = (0..9).map(|k| (k as f64).sin()).collect();
        let sol = simulate_from(&c, &g, &bw, &x, 3, ForwardOptions::default()).unwrap();
        for p in 0..4 {
            assert_eq!(&sol.x.path(p)[..4], &x[..4]);
            let mut acc = x[6];
            for k in 3..6 {
                acc += bw.dw(p, k);
            }
            assert!((sol.x.get(p, 6) - acc).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_is_located() {
        let g = make_grid(1.0, 4).unwrap();
        let bw = sample_brownian(&g, 3, 1, 8).unwrap();
        let mut c = builtin("bm", &Params::new()).unwrap();
        c.meta.deterministic_forward = false;
        c.b = std::sync::Arc::new(|t, _, _| if t > 0.6 { f64::NAN } else { 0.0 });
        let e = simulate(&c, &g, &bw, &[0.0; 5], ForwardOptions::default()).unwrap_err();
        assert!(matches!(e, Error::NonFinite { path: 0, i: 1, j: 3, .. }), "{e:?}");
    }

    #[test]
    fn variational_trivial_cases() {
        let g = make_grid(1.0, 8).unwrap();
        let bw = sample_brownian(&g, 5, 1, 9).unwrap();
        let c = builtin("state-lipschitz", &Params::new()).unwrap();
        let sol = simulate(&c, &g, &bw, &[0.0; 9], ForwardOptions::default()).unwrap();
        let v = simulate_variational_for(&c, &sol, &[0.0; 9], 2, &bw, false).unwrap();
        assert!(v.grad_x.as_slice().iter().all(|&x| x == 0.0));

        let bmc = builtin("bm", &Params::new()).unwrap();
        let sol = simulate(&bmc, &g, &bw, &[0.0; 9], ForwardOptions::default()).unwrap();
        let eta: Vec<f64> = (0..9).map(|k| k as f64 * 0.1).collect();
        let v = simulate_variational_for(&bmc, &sol, &eta, 2, &bw, true).unwrap();
        for p in 0..5 {
            assert_eq!(&v.grad_x.path(p)[2..], &eta[2..]);
        }
    }

    #[test]
    fn variational_dyadic_scaling_is_exact() {
        let g = make_grid(1.0, 8).unwrap();
        let bw = sample_brownian(&g, 5, 1, 10).unwrap();
        let c = builtin("state-lipschitz", &Params::new()).unwrap();
        let sol = simulate(&c, &g, &bw, &[0.1; 9], ForwardOptions::default()).unwrap();
        let eta: Vec<f64> = (0..9).map(|k| 1.0 + 0.3 * k as f64).collect();
        let eta4: Vec<f64> = eta.iter().map(|v| 4.0 * v).collect();
        let a = simulate_variational_for(&c, &sol, &eta, 1, &bw, false).unwrap();
        let b = simulate_variational_for(&c, &sol, &eta4, 1, &bw, false).unwrap();
        for (x, y) in a.grad_x.as_slice().iter().zip(b.grad_x.as_slice()) {
            assert_eq!((4.0 * x).to_bits(), y.to_bits());
        }
    }

    #[test]
    fn coupled_family_requires_input() {
        let g = make_grid(1.0, 4).unwrap();
        let bw = sample_brownian(&g, 3, 1, 8).unwrap();
        let c = builtin("coupled", &Params::new().with("kappa", 0.5)).unwrap();
        assert!(simulate(&c, &g, &bw, &[0.0; 5], ForwardOptions::default()).is_err());
        let y = PathBatch::from_vec(3, 5, vec![1.0; 15]).unwrap();
        let sol = simulate_coupled(&c, &g, &bw, &[0.0; 5], &y, ForwardOptions::default()).unwrap();
        for p in 0..3 {
            let w = bw.level(p, 4);
            assert!((sol.x.get(p, 4) - (0.5 + w)).abs() < 1e-12);
        }
    }
}
