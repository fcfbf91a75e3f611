//! Backward sweeps for type-I and type-II Volterra equations, and the
//! comparison harness.
//!
//! Parameter `i` of the family carries `Ỹ^{t_i}_{t_k}` for `k ≥ i`. One sweep
//! step `k` projects, for every active parameter,
//!
//! ```text
//! Z^{t_i}_{t_k} = E_k[Ỹ^{t_i}_{t_{k+1}} ΔW_k] / Δ
//! Ỹ^{t_i}_{t_k} = E_k[Ỹ^{t_i}_{t_{k+1}} + f(t_i, t_{k+1}, X, Y_{t_{k+1}}, Z^{t_i}_{t_{k+1}}) Δ]
//! ```
//!
//! and `Y_{t_k} = Ỹ^{t_k}_{t_k}`. Only two columns per parameter are kept in
//! memory unless the full fields are requested.

use crate::coefficients::{CoefficientSet, PathView};
use crate::condexp::{raw_variables, time_feature_map, BasisSpec, Design, FeatureMap, NormalFactor, Projector};
use crate::error::{Error, Result};
use crate::exec;
use crate::forward::ForwardSolution;
use crate::grid::{BrownianBatch, PathBatch, Region, TimeGrid, TwoTimeField};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BackwardOptions {
    pub basis: BasisSpec,
    /// One fixed-point pass per cell with the driver at the left node.
    pub implicit: bool,
    /// Materialize `Ỹ`, `Z` and (type-II) the lower `Z` field.
    pub store_fields: bool,
    /// Per-path regression standard errors of the diagonal.
    pub diag_stderr: bool,
    /// Keep `Ỹ` and `Z` of the extra parameters at every window node.
    pub track_extras: bool,
}

/// Terminal values and driver of one backward family.
pub trait SweepProblem: Sync {
    /// `Ỹ^{t_i}_{t_N}` on path `p`.
    fn terminal(&self, i: usize, p: usize) -> f64;
    /// Driver at `(t_i, t_r)` on path `p`.
    fn driver(&self, i: usize, r: usize, p: usize, y: f64, z: f64, z2: Option<f64>) -> f64;
    /// Whether the driver reads `z2`.
    fn type2(&self) -> bool;
}

/// [`SweepProblem`] of a coefficient set along a forward solution.
pub struct CoefficientProblem<'a> {
    pub coeffs: &'a CoefficientSet,
    pub fwd: &'a ForwardSolution,
    pub bw: &'a BrownianBatch,
    times: Vec<f64>,
    type2: bool,
}

impl<'a> CoefficientProblem<'a> {
    pub fn new(coeffs: &'a CoefficientSet, fwd: &'a ForwardSolution, bw: &'a BrownianBatch, type2: bool) -> Self {
        Self {
            coeffs,
            fwd,
            bw,
            times: fwd.grid.nodes(),
            type2,
        }
    }

    fn view(&self, p: usize, upto: usize) -> PathView<'a> {
        PathView {
            x: &self.fwd.x.path(p)[..=upto],
            w: &self.bw.levels_of(p)[..=upto],
            y: None,
            dt: self.fwd.grid.dt(),
        }
    }
}

impl SweepProblem for CoefficientProblem<'_> {
    fn terminal(&self, i: usize, p: usize) -> f64 {
        let n = self.fwd.grid.steps();
        (self.coeffs.g)(self.times[i], &self.view(p, n))
    }

    fn driver(&self, i: usize, r: usize, p: usize, y: f64, z: f64, z2: Option<f64>) -> f64 {
        let z2 = if self.type2 { z2 } else { None };
        (self.coeffs.f)(self.times[i], self.times[r], &self.view(p, r), y, z, z2)
    }

    fn type2(&self) -> bool {
        self.type2
    }
}

/// Regression diagnostics of one time node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellDiagnostics {
    pub k: usize,
    pub features: usize,
    pub condition: f64,
    pub pseudo_inverse: bool,
}

/// Values of a parameter below the window start at the first window node.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtraParameter {
    pub param: usize,
    /// `Ỹ^{t}_{t_s}` per path.
    pub y_at_start: Vec<f64>,
    /// `Z^{t}_{t_s}` per path.
    pub z_at_start: Vec<f64>,
    /// `Ỹ^{t}_{t_k}` and `Z^{t}_{t_k}` at window nodes `k` (zero before the
    /// window), when tracked.
    pub trajectory: Option<(PathBatch, PathBatch)>,
}

#[derive(Debug, Clone)]
pub struct BackwardSolution {
    pub grid: TimeGrid,
    pub start: usize,
    /// Diagonal `Y_{t_k}` (zero before `start`).
    pub y: PathBatch,
    pub mean_y: Vec<f64>,
    pub stderr_y: Vec<f64>,
    /// `Ỹ^{t_i}_{t_k}`, `k ≥ i`.
    pub ytilde: Option<TwoTimeField>,
    /// `Z^{t_i}_{t_k}`, `k ≥ i`; row ends are 0.
    pub z: Option<TwoTimeField>,
    /// Type-II `Z^{t_i}_{t_k}`, `k < i` (diagonal unused, 0).
    pub z2: Option<TwoTimeField>,
    pub extras: Vec<ExtraParameter>,
    /// Type-II: `var(Y_i − E Y_i − Σ_{j<i} Z^{t_i}_{t_j} ΔW_j) / var(Y_i)` per
    /// row (`NaN` when undefined).
    pub martingale_residual: Vec<f64>,
    /// Regression standard error of `Y_{t_k}` per path, when requested.
    pub y_stderr: Option<PathBatch>,
    pub diagnostics: Vec<CellDiagnostics>,
}

impl BackwardSolution {
    /// Largest type-II martingale residual ratio over the defined rows.
    pub fn max_martingale_residual(&self) -> f64 {
        self.martingale_residual
            .iter()
            .filter(|v| v.is_finite())
            .fold(0.0f64, |a, &b| a.max(b))
    }
}

/// Feature map and factorization of every node in the window.
struct NodeBases {
    maps: Vec<Option<FeatureMap>>,
    factors: Vec<Option<NormalFactor>>,
}

impl NodeBases {
    fn build(fwd: &ForwardSolution, bw: &BrownianBatch, basis: &BasisSpec, nodes: std::ops::Range<usize>) -> Result<Self> {
        let nn = fwd.grid.n_nodes();
        let mut maps = vec![None; nn];
        let mut factors = vec![None; nn];
        for k in nodes {
            let map = time_feature_map(fwd, bw, k, basis)?;
            let m = map.n_features();
            let factor = NormalFactor::from_rows(fwd.n_paths(), m, map.intercept(), basis.ridge, |p, row| {
                let mut r = Vec::with_capacity(8);
                raw_variables(fwd, bw, basis, p, k, &mut r);
                map.eval(&r, row);
            })
            .map_err(|e| Error::Regression {
                k,
                param: k,
                reason: e.to_string(),
            })?;
            maps[k] = Some(map);
            factors[k] = Some(factor);
        }
        Ok(Self { maps, factors })
    }

    fn projector(&self, fwd: &ForwardSolution, bw: &BrownianBatch, basis: &BasisSpec, k: usize) -> Result<Projector> {
        let map = self.maps[k].as_ref().expect("node basis");
        let design = Design::from_map(map, fwd.n_paths(), |p, r| raw_variables(fwd, bw, basis, p, k, r))?;
        Projector::with_factor(design, self.factors[k].clone().expect("node factor"))
    }
}

/// Runs the backward sweep over nodes `start..=N` for the diagonal
/// parameters `start..=N` and the additional parameters `extra` (all
/// `< start`).
pub fn sweep<P: SweepProblem>(
    problem: &P,
    fwd: &ForwardSolution,
    bw: &BrownianBatch,
    start: usize,
    extra: &[usize],
    opts: &BackwardOptions,
) -> Result<BackwardSolution> {
    let grid = fwd.grid;
    let n = grid.steps();
    let nn = grid.n_nodes();
    let np = fwd.n_paths();
    let dt = grid.dt();
    if start > n {
        return Err(Error::InvalidParameter(format!("window start {start} exceeds N = {n}")));
    }
    if start < fwd.start {
        return Err(Error::InvalidParameter(format!(
            "window start {start} precedes the forward start {}",
            fwd.start
        )));
    }
    if let Some(&e) = extra.iter().find(|&&e| e >= start) {
        return Err(Error::InvalidParameter(format!("extra parameter {e} is not below the window start {start}")));
    }
    if bw.n_paths() != np || bw.grid() != &grid {
        return Err(Error::Dimension("Brownian batch does not match the forward solution".into()));
    }
    let type2 = problem.type2();
    let basis = opts.basis;

    // Slot s < extra.len() is extra[s]; slot extra.len() + (i - start) is i.
    let n_extra = extra.len();
    let param_of = |slot: usize| if slot < n_extra { extra[slot] } else { start + slot - n_extra };
    let slot_of = |i: usize| n_extra + (i - start);
    let n_slots = n_extra + nn - start;

    let mut ycur: Vec<Vec<f64>> = (0..n_slots)
        .map(|s| {
            let i = param_of(s);
            exec::map_indexed(np, |p| problem.terminal(i, p))
        })
        .collect();
    let mut zcur: Vec<Vec<f64>> = vec![vec![0.0; np]; n_slots];
    for (s, col) in ycur.iter().enumerate() {
        if let Some(p) = col.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "terminal value",
                path: p,
                i: param_of(s),
                j: n,
            });
        }
    }

    let store = opts.store_fields;
    let mut ytilde = store.then(|| TwoTimeField::new(Region::Upper, nn, np));
    let mut zfield = store.then(|| TwoTimeField::new(Region::Upper, nn, np));
    let mut z2field = (store && type2).then(|| TwoTimeField::new(Region::Lower, nn, np));
    let write_column = |field: &mut Option<TwoTimeField>, i: usize, k: usize, col: &[f64]| {
        if let Some(f) = field.as_mut() {
            for (p, &v) in col.iter().enumerate() {
                f.set(p, i, k, v).expect("in region");
            }
        }
    };
    for i in start..nn {
        write_column(&mut ytilde, i, n, &ycur[slot_of(i)]);
    }

    let mut y = PathBatch::zeros(np, nn);
    let mut y_stderr = opts.diag_stderr.then(|| PathBatch::zeros(np, nn));
    for (p, v) in ycur[slot_of(n)].iter().enumerate() {
        y.set(p, n, *v);
    }
    let mut tracks: Vec<(PathBatch, PathBatch)> = if opts.track_extras {
        (0..n_extra).map(|_| (PathBatch::zeros(np, nn), PathBatch::zeros(np, nn))).collect()
    } else {
        Vec::new()
    };
    let record_tracks = |tracks: &mut Vec<(PathBatch, PathBatch)>, ycur: &[Vec<f64>], zcur: &[Vec<f64>], k: usize| {
        for (s, (yt, zt)) in tracks.iter_mut().enumerate() {
            for p in 0..np {
                yt.set(p, k, ycur[s][p]);
                zt.set(p, k, zcur[s][p]);
            }
        }
    };
    record_tracks(&mut tracks, &ycur, &zcur, n);
    let mut martingale_residual = vec![f64::NAN; nn];
    let mut diagnostics = Vec::new();

    let bases = NodeBases::build(fwd, bw, &basis, start..n)?;

    for k in (start..n).rev() {
        let proj = bases.projector(fwd, bw, &basis, k)?;
        diagnostics.push(CellDiagnostics {
            k,
            features: proj.n_features(),
            condition: proj.condition(),
            pseudo_inverse: proj.uses_pseudo_inverse(),
        });
        let ynext: Vec<f64> = ycur[slot_of(k + 1)].clone();

        // Martingale coefficients of Y_{t_{k+1}} at nodes start..=k.
        let z2row: Option<Vec<Vec<f64>>> = if type2 {
            let row = martingale_row(fwd, bw, &basis, &bases, &ynext, start, k, dt)?;
            martingale_residual[k + 1] = residual_ratio(bw, &ynext, &row, start);
            if let Some(f) = z2field.as_mut() {
                for (j, col) in row.iter().enumerate() {
                    for (p, &v) in col.iter().enumerate() {
                        f.set(p, k + 1, start + j, v).expect("in region");
                    }
                }
            }
            Some(row)
        } else {
            None
        };
        let z2_of = |i: usize, p: usize| -> Option<f64> {
            z2row.as_ref().map(|row| if i >= start { row[i - start][p] } else { 0.0 })
        };

        let active: Vec<usize> = (0..n_extra).chain(slot_of(start)..=slot_of(k)).collect();
        let (ys, zs, targets) =
            project_step(&proj, problem, &active, &param_of, &ycur, &zcur, &ynext, k, k + 1, dt, bw, &z2_of)?;
        let (ys, zs, targets) = if opts.implicit {
            // Driver at the left node with the explicit diagonal as Y_{t_k}.
            let ydiag = ys[active.iter().position(|&s| s == slot_of(k)).expect("diagonal slot")].clone();
            let mut zk = zcur.clone();
            for (a, &s) in active.iter().enumerate() {
                zk[s] = zs[a].clone();
            }
            let (ys2, _, targets2) =
                project_step(&proj, problem, &active, &param_of, &ycur, &zk, &ydiag, k, k, dt, bw, &z2_of)?;
            (ys2, zs, targets2)
        } else {
            (ys, zs, targets)
        };
        for (a, &s) in active.iter().enumerate() {
            let i = param_of(s);
            if let Some(p) = ys[a].iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "backward value",
                    path: p,
                    i,
                    j: k,
                });
            }
            if i >= start {
                write_column(&mut ytilde, i, k, &ys[a]);
                write_column(&mut zfield, i, k, &zs[a]);
            }
        }
        for ((&s, yv), zv) in active.iter().zip(ys).zip(zs) {
            ycur[s] = yv;
            zcur[s] = zv;
        }
        ycur[slot_of(k + 1)] = Vec::new();
        zcur[slot_of(k + 1)] = Vec::new();
        record_tracks(&mut tracks, &ycur, &zcur, k);
        let yk = &ycur[slot_of(k)];
        for (p, v) in yk.iter().enumerate() {
            y.set(p, k, *v);
        }
        if let Some(se) = y_stderr.as_mut() {
            let a = active.iter().position(|&s| s == slot_of(k)).expect("diagonal slot");
            let fitted = &ycur[slot_of(k)];
            let sq: Vec<f64> = targets[a].iter().zip(fitted).map(|(t, f)| (t - f) * (t - f)).collect();
            let var = exec::ordered_sum(&sq) / np as f64;
            let lev = exec::map_indexed(np, |p| proj.leverage(p));
            for (p, l) in lev.iter().enumerate() {
                se.set(p, k, (var * l).max(0.0).sqrt());
            }
        }
    }

    let mut tracks = tracks.into_iter();
    let extras = (0..n_extra)
        .map(|s| ExtraParameter {
            param: extra[s],
            y_at_start: ycur[s].clone(),
            z_at_start: zcur[s].clone(),
            trajectory: tracks.next(),
        })
        .collect();

    let mut mean_y = vec![0.0; nn];
    let mut stderr_y = vec![0.0; nn];
    for k in start..nn {
        let (m, se) = exec::mean_stderr(&y.column(k));
        mean_y[k] = m;
        stderr_y[k] = se;
    }

    Ok(BackwardSolution {
        grid,
        start,
        y,
        mean_y,
        stderr_y,
        ytilde,
        z: zfield,
        z2: z2field,
        extras,
        martingale_residual,
        y_stderr,
        diagnostics,
    })
}

/// Projects the targets of every active slot at node `k` with the driver
/// evaluated at node `r`.
#[allow(clippy::too_many_arguments)]
fn project_step<P: SweepProblem>(
    proj: &Projector,
    problem: &P,
    active: &[usize],
    param_of: &(dyn Fn(usize) -> usize + Sync),
    ycur: &[Vec<f64>],
    zcur: &[Vec<f64>],
    ydiag: &[f64],
    k: usize,
    r: usize,
    dt: f64,
    bw: &BrownianBatch,
    z2_of: &(dyn Fn(usize, usize) -> Option<f64> + Sync),
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let np = ydiag.len();
    let mut ytargets = Vec::with_capacity(active.len());
    let mut ztargets = Vec::with_capacity(active.len());
    for &s in active {
        let i = param_of(s);
        let yc = &ycur[s];
        let zc = &zcur[s];
        let zt: Vec<f64> = exec::map_indexed(np, |p| yc[p] * bw.dw(p, k));
        let yt: Vec<f64> = exec::map_indexed(np, |p| {
            yc[p] + problem.driver(i, r, p, ydiag[p], zc[p], z2_of(i, p)) * dt
        });
        if let Some(p) = yt.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "driver",
                path: p,
                i,
                j: r,
            });
        }
        ytargets.push(yt);
        ztargets.push(zt);
    }
    let refs: Vec<&[f64]> = ytargets.iter().chain(ztargets.iter()).map(Vec::as_slice).collect();
    let mut fitted = proj.project_many(&refs).map_err(|e| Error::Regression {
        k,
        param: param_of(active[0]),
        reason: e.to_string(),
    })?;
    let mut zs = fitted.split_off(active.len());
    for z in zs.iter_mut() {
        for v in z.iter_mut() {
            *v /= dt;
        }
    }
    Ok((fitted, zs, ytargets))
}

/// `Z^{t_{k+1}}_{t_j} = E_j[Y_{t_{k+1}} ΔW_j] / Δ` for `j = start..=k`.
#[allow(clippy::too_many_arguments)]
fn martingale_row(
    fwd: &ForwardSolution,
    bw: &BrownianBatch,
    basis: &BasisSpec,
    bases: &NodeBases,
    ynext: &[f64],
    start: usize,
    k: usize,
    dt: f64,
) -> Result<Vec<Vec<f64>>> {
    let np = fwd.n_paths();
    let nodes: Vec<usize> = (start..=k).collect();
    let ms: Vec<usize> = nodes.iter().map(|&j| bases.maps[j].as_ref().expect("map").n_features()).collect();
    let offsets: Vec<usize> = ms
        .iter()
        .scan(0, |acc, &m| {
            let o = *acc;
            *acc += m;
            Some(o)
        })
        .collect();
    let total: usize = ms.iter().sum();
    let features = |p: usize, j_idx: usize, out: &mut [f64], raw: &mut Vec<f64>| {
        let j = nodes[j_idx];
        raw_variables(fwd, bw, basis, p, j, raw);
        bases.maps[j].as_ref().expect("map").eval(raw, out);
    };
    let rhs = exec::reduce_blocks(
        np,
        |lo, hi| {
            let mut acc = vec![0.0; total];
            let mut phi = vec![0.0; 64];
            let mut raw = Vec::new();
            for p in lo..hi {
                for (a, &j) in nodes.iter().enumerate() {
                    let m = ms[a];
                    if phi.len() < m {
                        phi.resize(m, 0.0);
                    }
                    features(p, a, &mut phi[..m], &mut raw);
                    let t = ynext[p] * bw.dw(p, j);
                    for (x, f) in acc[offsets[a]..offsets[a] + m].iter_mut().zip(&phi[..m]) {
                        *x += f * t;
                    }
                }
            }
            acc
        },
        |mut x, y| {
            for (a, b) in x.iter_mut().zip(&y) {
                *a += b;
            }
            x
        },
    )
    .unwrap_or_default();
    let mut coefs = Vec::with_capacity(nodes.len());
    for (a, &j) in nodes.iter().enumerate() {
        let c = bases.factors[j]
            .as_ref()
            .expect("factor")
            .solve_sum(&rhs[offsets[a]..offsets[a] + ms[a]])
            .map_err(|e| Error::Regression {
                k: j,
                param: k + 1,
                reason: e.to_string(),
            })?;
        coefs.push(c);
    }
    let per_path: Vec<Vec<f64>> = exec::map_indexed(np, |p| {
        let mut phi = vec![0.0; 64];
        let mut raw = Vec::new();
        (0..nodes.len())
            .map(|a| {
                let m = ms[a];
                if phi.len() < m {
                    phi.resize(m, 0.0);
                }
                features(p, a, &mut phi[..m], &mut raw);
                phi[..m].iter().zip(&coefs[a]).map(|(x, c)| x * c).sum::<f64>() / dt
            })
            .collect()
    });
    Ok((0..nodes.len())
        .map(|a| per_path.iter().map(|row| row[a]).collect())
        .collect())
}

fn residual_ratio(bw: &BrownianBatch, yi: &[f64], row: &[Vec<f64>], start: usize) -> f64 {
    let np = yi.len();
    let (mean, _) = exec::mean_stderr(yi);
    let var_y = exec::sample_variance(yi);
    if !(var_y > 1e-300) {
        return f64::NAN;
    }
    let resid: Vec<f64> = exec::map_indexed(np, |p| {
        let mut r = yi[p] - mean;
        for (a, col) in row.iter().enumerate() {
            r -= col[p] * bw.dw(p, start + a);
        }
        r
    });
    exec::sample_variance(&resid) / var_y
}

fn check_forward(fwd: &ForwardSolution, bw: &BrownianBatch) -> Result<()> {
    bw.require_scalar()?;
    if fwd.n_paths() != bw.n_paths() {
        return Err(Error::Dimension("forward solution and Brownian batch differ in size".into()));
    }
    Ok(())
}

/// Type-I solve over the whole grid.
pub fn solve_type1(
    coeffs: &CoefficientSet,
    fwd: &ForwardSolution,
    bw: &BrownianBatch,
    opts: &BackwardOptions,
) -> Result<BackwardSolution> {
    if coeffs.meta.type2 {
        return Err(Error::InvalidParameter(format!(
            "'{}' is a type-II family; use solve_type2",
            coeffs.name
        )));
    }
    check_forward(fwd, bw)?;
    let problem = CoefficientProblem::new(coeffs, fwd, bw, false);
    sweep(&problem, fwd, bw, fwd.start, &[], opts)
}

/// Type-II (M-solution) solve over the whole grid.
pub fn solve_type2(
    coeffs: &CoefficientSet,
    fwd: &ForwardSolution,
    bw: &BrownianBatch,
    opts: &BackwardOptions,
) -> Result<BackwardSolution> {
    check_forward(fwd, bw)?;
    let problem = CoefficientProblem::new(coeffs, fwd, bw, true);
    sweep(&problem, fwd, bw, fwd.start, &[], opts)
}

/// Type-I or type-II according to the coefficient metadata.
pub fn solve(
    coeffs: &CoefficientSet,
    fwd: &ForwardSolution,
    bw: &BrownianBatch,
    opts: &BackwardOptions,
) -> Result<BackwardSolution> {
    if coeffs.meta.type2 {
        solve_type2(coeffs, fwd, bw, opts)
    } else {
        solve_type1(coeffs, fwd, bw, opts)
    }
}

/// Outcome of a comparison run.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    /// `f_A ≤ f_B`, `g_A ≤ g_B` held at every sampled point and one of the
    /// drivers is nondecreasing in `y`.
    pub hypotheses_hold: bool,
    pub hypothesis_violations: Vec<String>,
    /// `max_{p,i} (Y^A − Y^B)₊`.
    pub max_gap: f64,
    /// Cells with `Y^A − Y^B` above the tolerance.
    pub violations: usize,
    pub cells: usize,
    /// Tolerance multiplier applied to the Monte Carlo standard error.
    pub tolerance_se: f64,
    pub mean_a: Vec<f64>,
    pub mean_b: Vec<f64>,
}

fn sample_hypotheses(a: &CoefficientSet, b: &CoefficientSet, fwd: &ForwardSolution, bw: &BrownianBatch) -> Vec<String> {
    let mut out = Vec::new();
    if !(a.meta.monotone_in_y || b.meta.monotone_in_y) {
        out.push("neither driver is declared nondecreasing in y".into());
    }
    let grid = fwd.grid;
    let times = grid.nodes();
    let n = grid.steps();
    let stride = (fwd.n_paths() / 64).max(1);
    for p in (0..fwd.n_paths()).step_by(stride).take(64) {
        let x = fwd.x.path(p);
        let w = bw.levels_of(p);
        let full = PathView::new(x, w, grid.dt());
        for i in (0..=n).step_by((n / 8).max(1)) {
            let (ga, gb) = ((a.g)(times[i], &full), (b.g)(times[i], &full));
            if ga > gb {
                out.push(format!("g_A > g_B at path {p}, t index {i}"));
            }
            for r in (i..=n).step_by((n / 8).max(1)) {
                let v = full.prefix(r);
                for (yv, zv) in [(-1.0, -1.0), (0.0, 0.0), (1.0, 0.5), (2.0, -0.5)] {
                    let (fa, fb) = (
                        (a.f)(times[i], times[r], &v, yv, zv, Some(zv)),
                        (b.f)(times[i], times[r], &v, yv, zv, Some(zv)),
                    );
                    if fa > fb {
                        out.push(format!("f_A > f_B at path {p}, ({i}, {r}), y = {yv}, z = {zv}"));
                    }
                }
            }
        }
        if out.len() > 16 {
            break;
        }
    }
    out
}

/// Solves both families with common random numbers and reports where
/// `Y^A` exceeds `Y^B` by more than `tolerance_se` Monte Carlo standard
/// errors of the difference.
pub fn compare(
    a: &CoefficientSet,
    b: &CoefficientSet,
    fwd: &ForwardSolution,
    bw: &BrownianBatch,
    opts: &BackwardOptions,
    tolerance_se: f64,
) -> Result<ComparisonReport> {
    let violations_h = sample_hypotheses(a, b, fwd, bw);
    let sa = solve(a, fwd, bw, opts)?;
    let sb = solve(b, fwd, bw, opts)?;
    let nn = fwd.grid.n_nodes();
    let np = fwd.n_paths();
    let mut max_gap: f64 = 0.0;
    let mut violations = 0;
    for k in fwd.start..nn {
        let d: Vec<f64> = (0..np).map(|p| sa.y.get(p, k) - sb.y.get(p, k)).collect();
        let (_, se) = exec::mean_stderr(&d);
        let tol = tolerance_se * se + 1e-12;
        for v in d {
            max_gap = max_gap.max(v);
            if v > tol {
                violations += 1;
            }
        }
    }
    Ok(ComparisonReport {
        hypotheses_hold: violations_h.is_empty(),
        hypothesis_violations: violations_h,
        max_gap,
        violations,
        cells: np * (nn - fwd.start),
        tolerance_se,
        mean_a: sa.mean_y,
        mean_b: sb.mean_y,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{builtin, Params};
    use crate::forward::{simulate, ForwardOptions};
    use crate::grid::{make_grid, sample_brownian};
    use std::sync::Arc;

    fn setup(name: &str, n_steps: usize, paths: usize, seed: u64) -> (CoefficientSet, ForwardSolution, BrownianBatch) {
        let g = make_grid(1.0, n_steps).unwrap();
        let bw = sample_brownian(&g, paths, 1, seed).unwrap();
        let c = builtin(name, &Params::new()).unwrap();
        let fwd = simulate(&c, &g, &bw, &vec![0.0; n_steps + 1], ForwardOptions::default()).unwrap();
        (c, fwd, bw)
    }

    #[test]
    fn constant_driver_integrates_exactly() {
        let (mut c, fwd, bw) = setup("bm", 16, 2000, 1);
        c.f = Arc::new(|_, _, _, _, _, _| 0.75);
        c.g = Arc::new(|_, _| 0.0);
        let sol = solve_type1(&c, &fwd, &bw, &BackwardOptions::default()).unwrap();
        for k in 0..=16 {
            let expect = 0.75 * (1.0 - k as f64 / 16.0);
            for p in 0..2000 {
                assert!((sol.y.get(p, k) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn martingale_terminal() {
        let (c, fwd, bw) = setup("bm", 16, 20_000, 2);
        let opts = BackwardOptions {
            diag_stderr: true,
            ..BackwardOptions::default()
        };
        let sol = solve_type1(&c, &fwd, &bw, &opts).unwrap();
        let se = sol.y_stderr.as_ref().unwrap();
        for k in 1..16 {
            let mut err2 = 0.0;
            let mut se2 = 0.0;
            for p in 0..20_000 {
                err2 += (sol.y.get(p, k) - bw.level(p, k)).powi(2);
                se2 += se.get(p, k).powi(2);
            }
            assert!(err2.sqrt() <= 3.0 * se2.sqrt(), "k = {k}: {err2} vs {se2}");
        }
    }

    #[test]
    fn diagonal_and_terminal_identities() {
        let (c, fwd, bw) = setup("state-lipschitz", 8, 500, 3);
        let opts = BackwardOptions {
            store_fields: true,
            ..BackwardOptions::default()
        };
        let sol = solve_type1(&c, &fwd, &bw, &opts).unwrap();
        let yt = sol.ytilde.as_ref().unwrap();
        let z = sol.z.as_ref().unwrap();
        let times = fwd.grid.nodes();
        for p in 0..500 {
            let view = PathView::new(fwd.x.path(p), bw.levels_of(p), fwd.grid.dt());
            for i in 0..=8 {
                assert_eq!(yt.get(p, i, i).unwrap().to_bits(), sol.y.get(p, i).to_bits());
                assert_eq!(yt.get(p, i, 8).unwrap().to_bits(), (c.g)(times[i], &view).to_bits());
                assert_eq!(z.get(p, i, 8).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn type2_without_z2_matches_type1() {
        let (_, fwd, bw) = setup("bm", 8, 3000, 4);
        let c2 = builtin("type2-linear", &Params::new().with("c", 0.0)).unwrap();
        let mut c1 = c2.clone();
        c1.meta.type2 = false;
        let opts = BackwardOptions::default();
        let a = solve_type1(&c1, &fwd, &bw, &opts).unwrap();
        let b = solve_type2(&c2, &fwd, &bw, &opts).unwrap();
        assert_eq!(a.y, b.y);
    }

    #[test]
    fn deterministic_terminal_has_no_martingale_part() {
        let (mut c, fwd, bw) = setup("bm", 8, 5000, 5);
        c.g = Arc::new(|t, _| 1.0 + t);
        c.meta.type2 = true;
        let opts = BackwardOptions {
            store_fields: true,
            ..BackwardOptions::default()
        };
        let sol = solve_type2(&c, &fwd, &bw, &opts).unwrap();
        let z2 = sol.z2.as_ref().unwrap();
        for i in 1..=8 {
            for j in 0..i {
                let col: Vec<f64> = (0..5000).map(|p| z2.get(p, i, j).unwrap()).collect();
                // Pure regression noise: O(|Y| / sqrt(n Δ)).
                let rms = (col.iter().map(|v| v * v).sum::<f64>() / 5000.0).sqrt();
                assert!(rms < 4.0 * 2.0 / (5000.0f64 * 0.125).sqrt(), "({i}, {j}): {rms}");
            }
            assert!((sol.mean_y[i] - (1.0 + i as f64 / 8.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn worker_count_invariance() {
        let (c, fwd, bw) = setup("type2-linear", 8, 5000, 6);
        let opts = BackwardOptions::default();
        let a = exec::with_threads(1, || solve(&c, &fwd, &bw, &opts).unwrap());
        let b = exec::with_threads(3, || solve(&c, &fwd, &bw, &opts).unwrap());
        assert_eq!(a.y, b.y);
        assert_eq!(a.martingale_residual.len(), b.martingale_residual.len());
    }

    #[test]
    fn rejects_type2_family_in_type1() {
        let (_, fwd, bw) = setup("bm", 4, 100, 7);
        let c = builtin("type2-linear", &Params::new()).unwrap();
        assert!(solve_type1(&c, &fwd, &bw, &BackwardOptions::default()).is_err());
    }

    #[test]
    fn comparison_reflexive_and_shifted() {
        let (c, fwd, bw) = setup("state-lipschitz", 8, 3000, 8);
        let opts = BackwardOptions::default();
        let r = compare(&c, &c, &fwd, &bw, &opts, 3.0).unwrap();
        assert!(r.hypotheses_hold);
        assert_eq!(r.violations, 0);
        assert_eq!(r.max_gap, 0.0);
        let b = c.clone().shift_terminal(1.0);
        let r = compare(&c, &b, &fwd, &bw, &opts, 3.0).unwrap();
        assert!(r.hypotheses_hold);
        assert_eq!(r.violations, 0);
        let r = compare(&b, &c, &fwd, &bw, &opts, 3.0).unwrap();
        assert!(!r.hypotheses_hold);
        assert!(r.violations > 0);
    }

    #[test]
    fn implicit_scheme_close_to_explicit() {
        let (mut c, fwd, bw) = setup("bm", 32, 2000, 9);
        c.f = Arc::new(|_, _, _, y, _, _| -y);
        c.g = Arc::new(|_, _| 1.0);
        let e = solve_type1(&c, &fwd, &bw, &BackwardOptions::default()).unwrap();
        let i = solve_type1(
            &c,
            &fwd,
            &bw,
            &BackwardOptions {
                implicit: true,
                ..BackwardOptions::default()
            },
        )
        .unwrap();
        // Y_t = 1 − ∫_t^T Y_r dr has Y_0 = e^{-1}; both schemes are O(Δ).
        let exact = (-1.0f64).exp();
        assert!((e.mean_y[0] - exact).abs() < 0.02);
        assert!((i.mean_y[0] - exact).abs() < 0.02);
        assert!(e.mean_y[0] != i.mean_y[0]);
    }
}
