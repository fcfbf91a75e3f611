//! Variation-of-constants oracle for linear equations
//!
//! ```text
//! Y_t = ξ_t + ∫_t^T (α(t, r) Y_r + β(t, r) Z^t_r) dr − ∫_t^T Z^t_r dW_r
//! ```
//!
//! and the duality identity between a linear forward equation and its
//! type-II adjoint. Everything is discretized on the same grid and with the
//! same quadrature as the backward sweep.

use std::sync::Arc;

use crate::backward::{solve_type2, BackwardOptions};
use crate::coefficients::{CoefficientSet, LinearBSVIESpec, Metadata, PathView, TerminalFn};
use crate::error::{Error, Result};
use crate::exec;
use crate::forward::{simulate, ForwardOptions};
use crate::grid::{BrownianBatch, PathBatch, Region, TimeGrid, TwoTimeField};

/// Deterministic function of two grid times.
pub type TwoTimeFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Per-path stochastic exponential, kernel and resolvent.
#[derive(Debug, Clone)]
pub struct ResolventTable {
    pub m: TwoTimeField,
    pub k1: TwoTimeField,
    pub gamma: TwoTimeField,
}

/// Table of `h(t_i, t_k)` for `i ≤ k`, row-major over `(N+1)²`.
fn table(grid: &TimeGrid, h: &(dyn Fn(f64, f64) -> f64 + Sync)) -> Result<Vec<f64>> {
    let nn = grid.n_nodes();
    let times = grid.nodes();
    let mut out = vec![0.0; nn * nn];
    for i in 0..nn {
        for k in i..nn {
            let v = h(times[i], times[k]);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: "linear coefficient",
                    path: 0,
                    i,
                    j: k,
                });
            }
            out[i * nn + k] = v;
        }
    }
    Ok(out)
}

/// Fills `row[k − from] = Π_{q=from}^{k−1} exp(β(t_i, t_q) ΔW_q − ½ β² Δ)`
/// for `k = from..=N`.
fn exponential_row(beta: &[f64], nn: usize, i: usize, from: usize, dw: &[f64], dt: f64, row: &mut [f64]) {
    let mut m = 1.0;
    row[0] = m;
    for q in from..nn - 1 {
        let b = beta[i * nn + q];
        if b != 0.0 {
            m *= (b * dw[q] - 0.5 * b * b * dt).exp();
        }
        row[q + 1 - from] = m;
    }
}

/// `M^{t_i}_{t_k}` by the log-Euler scheme with left-endpoint `β`.
pub fn stochastic_exponential(
    beta: &(dyn Fn(f64, f64) -> f64 + Sync),
    grid: &TimeGrid,
    bw: &BrownianBatch,
) -> Result<TwoTimeField> {
    bw.require_scalar()?;
    let nn = grid.n_nodes();
    let bt = table(grid, beta)?;
    let mut m = TwoTimeField::new(Region::Upper, nn, bw.n_paths());
    let tri = m.cells_per_path();
    let offsets: Vec<usize> = (0..nn).map(|i| m.local_offset(i, i)).collect();
    exec::for_each_chunk_mut(m.path_block_mut_all(), tri, |p, block| {
        let dw = bw.increments_of(p);
        for i in 0..nn {
            let o = offsets[i];
            exponential_row(&bt, nn, i, i, dw, grid.dt(), &mut block[o..o + nn - i]);
        }
    });
    Ok(m)
}

/// `Γ(t_i, t_j) = K₁(t_i, t_j) + Σ_{i<k<j} K₁(t_i, t_k) Γ(t_k, t_j) Δ` per path.
pub fn resolvent(k1: &TwoTimeField, grid: &TimeGrid) -> Result<TwoTimeField> {
    if k1.region() != Region::Upper || k1.n_nodes() != grid.n_nodes() {
        return Err(Error::Dimension("K1 must be an upper field on the grid".into()));
    }
    let nn = grid.n_nodes();
    let dt = grid.dt();
    let mut gamma = TwoTimeField::new(Region::Upper, nn, k1.n_paths());
    let tri = gamma.cells_per_path();
    let at = |i: usize, j: usize| k1.local_offset(i, j);
    exec::for_each_chunk_mut(gamma.path_block_mut_all(), tri, |p, g| {
        let k = k1.path_block(p);
        for i in (0..nn).rev() {
            for j in i..nn {
                let mut acc = k[at(i, j)];
                for q in i + 1..j {
                    acc += k[at(i, q)] * g[at(q, j)] * dt;
                }
                g[at(i, j)] = acc;
            }
        }
    });
    Ok(gamma)
}

/// Single-path upper field `K(t_i, t_j)` of a deterministic kernel.
pub fn kernel_field(k: &dyn Fn(f64, f64) -> f64, grid: &TimeGrid) -> TwoTimeField {
    let nn = grid.n_nodes();
    let mut out = TwoTimeField::new(Region::Upper, nn, 1);
    for i in 0..nn {
        for j in i..nn {
            out.set(0, i, j, k(grid.t(i), grid.t(j))).expect("upper cell");
        }
    }
    out
}

/// Truncated Neumann series `Σ_{n=1}^{terms} K_n` with
/// `K_{n+1}(t_i, t_j) = Σ_{i<q<j} K₁(t_i, t_q) K_n(t_q, t_j) Δ`.
pub fn resolvent_series(k1: &TwoTimeField, grid: &TimeGrid, terms: usize) -> Result<TwoTimeField> {
    if k1.region() != Region::Upper || k1.n_nodes() != grid.n_nodes() {
        return Err(Error::Dimension("K1 must be an upper field on the grid".into()));
    }
    let nn = grid.n_nodes();
    let dt = grid.dt();
    let mut sum = TwoTimeField::new(Region::Upper, nn, k1.n_paths());
    let tri = sum.cells_per_path();
    let at = |i: usize, j: usize| k1.local_offset(i, j);
    exec::for_each_chunk_mut(sum.path_block_mut_all(), tri, |p, out| {
        let k = k1.path_block(p);
        let mut kn = k.to_vec();
        let mut next = vec![0.0; tri];
        for n in 0..terms {
            for (o, v) in out.iter_mut().zip(&kn) {
                *o += v;
            }
            if n + 1 == terms {
                break;
            }
            for i in 0..nn {
                for j in i..nn {
                    let mut acc = 0.0;
                    for q in i + 1..j {
                        acc += k[at(i, q)] * kn[at(q, j)] * dt;
                    }
                    next[at(i, j)] = acc;
                }
            }
            std::mem::swap(&mut kn, &mut next);
        }
    });
    Ok(sum)
}

/// `max |Γ − K₁ − Σ K₁ Γ Δ|` over all paths and cells.
pub fn resolvent_residual(k1: &TwoTimeField, gamma: &TwoTimeField, dt: f64) -> f64 {
    let nn = k1.n_nodes();
    let mut worst = 0.0f64;
    for p in 0..k1.n_paths() {
        let (k, g) = (k1.path_block(p), gamma.path_block(p));
        for i in 0..nn {
            for j in i..nn {
                let mut acc = k[k1.local_offset(i, j)];
                for q in i + 1..j {
                    acc += k[k1.local_offset(i, q)] * g[k1.local_offset(q, j)] * dt;
                }
                worst = worst.max((g[k1.local_offset(i, j)] - acc).abs());
            }
        }
    }
    worst
}

impl ResolventTable {
    /// Builds `M`, `K₁ = M α` and `Γ` for every path of `bw`.
    pub fn build(spec: &LinearBSVIESpec, grid: &TimeGrid, bw: &BrownianBatch) -> Result<Self> {
        let m = stochastic_exponential(spec.beta.as_ref(), grid, bw)?;
        let nn = grid.n_nodes();
        let at = table(grid, spec.alpha.as_ref())?;
        let mut k1 = m.clone();
        let tri = k1.cells_per_path();
        let offsets: Vec<usize> = (0..nn).map(|i| m.local_offset(i, i)).collect();
        exec::for_each_chunk_mut(k1.path_block_mut_all(), tri, |_, block| {
            for i in 0..nn {
                for j in i..nn {
                    block[offsets[i] + j - i] *= at[i * nn + j];
                }
            }
        });
        let gamma = resolvent(&k1, grid)?;
        Ok(Self { m, k1, gamma })
    }

    /// Per-path `M^{t_i}_{t_N} ξ_{t_i} + Σ_{k>i} Γ(t_i, t_k) M^{t_k}_{t_N} ξ_{t_k} Δ`
    /// with `X = W`.
    pub fn values(&self, spec: &LinearBSVIESpec, grid: &TimeGrid, bw: &BrownianBatch) -> PathBatch {
        let nn = grid.n_nodes();
        let n = nn - 1;
        let times = grid.nodes();
        let dt = grid.dt();
        let mut out = PathBatch::zeros(bw.n_paths(), nn);
        for p in 0..bw.n_paths() {
            let w = bw.levels_of(p);
            let view = PathView::new(w, w, dt);
            let v: Vec<f64> = (0..nn)
                .map(|k| self.m.get(p, k, n).unwrap() * (spec.xi)(times[k], &view))
                .collect();
            for i in 0..nn {
                let mut y = v[i];
                for k in i + 1..nn {
                    y += self.gamma.get(p, i, k).unwrap() * v[k] * dt;
                }
                out.set(p, i, y);
            }
        }
        out
    }
}

/// Closed-form estimate of `Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedForm {
    /// Estimate of `E[Y_{t_i}]`.
    pub mean_y: Vec<f64>,
    /// Monte Carlo standard error (0 on the deterministic branch).
    pub stderr_y: Vec<f64>,
    /// Per-path values of the formula (one row on the deterministic branch).
    pub values: PathBatch,
    pub deterministic: bool,
}

/// Variation-of-constants formula driven by `X = W`.
///
/// Deterministic specs solve `Y_i = ξ_i + Σ_{k>i} α(t_i, t_k) Y_k Δ` by
/// backward substitution. Otherwise the per-path value
/// `M^{t_i}_{t_N} ξ_{t_i} + Σ_{k>i} Γ(t_i, t_k) M^{t_k}_{t_N} ξ_{t_k} Δ` is
/// averaged. The resolvent sum is evaluated through
/// `u_i = Σ_{k>i} K₁(t_i, t_k)(v_k + u_k) Δ`, which is the same quantity
/// without materializing `Γ`.
pub fn closed_form(spec: &LinearBSVIESpec, grid: &TimeGrid, bw: &BrownianBatch) -> Result<ClosedForm> {
    if spec.deterministic {
        return deterministic_closed_form(spec, grid);
    }
    bw.require_scalar()?;
    let nn = grid.n_nodes();
    let values = path_values(spec, grid, bw, |p, x| x.copy_from_slice(bw.levels_of(p)), 0)?;
    let mut mean_y = vec![0.0; nn];
    let mut stderr_y = vec![0.0; nn];
    for k in 0..nn {
        (mean_y[k], stderr_y[k]) = exec::mean_stderr(&values.column(k));
    }
    Ok(ClosedForm {
        mean_y,
        stderr_y,
        values,
        deterministic: false,
    })
}

fn deterministic_closed_form(spec: &LinearBSVIESpec, grid: &TimeGrid) -> Result<ClosedForm> {
    let nn = grid.n_nodes();
    let times = grid.nodes();
    let dt = grid.dt();
    let zero = vec![0.0; nn];
    let view = PathView::new(&zero, &zero, dt);
    let mut y = vec![0.0; nn];
    for i in (0..nn).rev() {
        let mut acc = (spec.xi)(times[i], &view);
        for k in i + 1..nn {
            acc += (spec.alpha)(times[i], times[k]) * y[k] * dt;
        }
        if !acc.is_finite() {
            return Err(Error::NonFinite {
                what: "closed form",
                path: 0,
                i,
                j: i,
            });
        }
        y[i] = acc;
    }
    Ok(ClosedForm {
        values: PathBatch::from_vec(1, nn, y.clone())?,
        mean_y: y,
        stderr_y: vec![0.0; nn],
        deterministic: true,
    })
}

/// Per-path `Y` values for nodes `≥ s` along the paths built by `fill`.
fn path_values(
    spec: &LinearBSVIESpec,
    grid: &TimeGrid,
    bw: &BrownianBatch,
    fill: impl Fn(usize, &mut [f64]) + Sync + Send,
    s: usize,
) -> Result<PathBatch> {
    let nn = grid.n_nodes();
    let dt = grid.dt();
    let times = grid.nodes();
    let bt = table(grid, spec.beta.as_ref())?;
    let at = table(grid, spec.alpha.as_ref())?;
    let mut values = PathBatch::zeros(bw.n_paths(), nn);
    let bad = std::sync::atomic::AtomicUsize::new(usize::MAX);
    exec::for_each_chunk_mut(values.as_mut_slice(), nn, |p, yrow| {
        let mut x = vec![0.0; nn];
        fill(p, &mut x);
        let view = PathView::new(&x, bw.levels_of(p), dt);
        let dw = bw.increments_of(p);
        let mut mrow = vec![0.0; nn];
        let mut v = vec![0.0; nn];
        let mut u = vec![0.0; nn];
        for i in (s..nn).rev() {
            exponential_row(&bt, nn, i, i, dw, dt, &mut mrow[..nn - i]);
            v[i] = mrow[nn - 1 - i] * (spec.xi)(times[i], &view);
            let mut acc = 0.0;
            for k in i + 1..nn {
                acc += mrow[k - i] * at[i * nn + k] * (v[k] + u[k]) * dt;
            }
            u[i] = acc;
            yrow[i] = v[i] + u[i];
        }
        if !yrow.iter().all(|y| y.is_finite()) {
            bad.fetch_min(p, std::sync::atomic::Ordering::Relaxed);
        }
    });
    let p = bad.into_inner();
    if p != usize::MAX {
        return Err(Error::NonFinite {
            what: "closed form",
            path: p,
            i: s,
            j: nn - 1,
        });
    }
    Ok(values)
}

/// `Ỹ^{t}_{t_s}` for the equation restarted at `s` from the frozen path `x`:
/// `X = x` on `[0, t_s]` and `x_s + W − W_{t_s}` afterwards. Returns the mean
/// and standard error over the paths of `bw` (only increments from `s` on are
/// read).
pub fn closed_form_restarted(
    spec: &LinearBSVIESpec,
    grid: &TimeGrid,
    bw: &BrownianBatch,
    x: &[f64],
    s: usize,
    t: usize,
) -> Result<(f64, f64)> {
    let nn = grid.n_nodes();
    if x.len() != nn {
        return Err(Error::Dimension(format!("initial path has {} nodes, grid has {nn}", x.len())));
    }
    if t > s || s >= nn {
        return Err(Error::InvalidParameter(format!("need t ≤ s ≤ N, got t = {t}, s = {s}")));
    }
    bw.require_scalar()?;
    let dt = grid.dt();
    let times = grid.nodes();
    let fill = |p: usize, out: &mut [f64]| {
        out[..=s].copy_from_slice(&x[..=s]);
        let w = bw.levels_of(p);
        for k in s + 1..nn {
            out[k] = x[s] + w[k] - w[s];
        }
    };
    let diag = path_values(spec, grid, bw, fill, s + 1)?;
    let bt = table(grid, spec.beta.as_ref())?;
    let at = table(grid, spec.alpha.as_ref())?;
    let vals = exec::map_indexed(bw.n_paths(), |p| {
        let mut path = vec![0.0; nn];
        fill(p, &mut path);
        let view = PathView::new(&path, bw.levels_of(p), dt);
        let mut mrow = vec![0.0; nn - s];
        exponential_row(&bt, nn, t, s, bw.increments_of(p), dt, &mut mrow);
        let y = diag.path(p);
        let mut acc = mrow[nn - 1 - s] * (spec.xi)(times[t], &view);
        for r in s + 1..nn {
            acc += mrow[r - s] * at[t * nn + r] * y[r] * dt;
        }
        acc
    });
    Ok(exec::mean_stderr(&vals))
}

/// Linear forward equation
/// `𝒳_t = η_t + ∫_0^t b(t, s) 𝒳_s ds + ∫_0^t σ(t, s) 𝒳_s dW_s`
/// paired with the type-II equation
/// `Y_t = g(t) + ∫_t^T (b(s, t) Y_s + σ(s, t) Z(s, t)) ds − ∫_t^T Z(t, s) dW_s`.
#[derive(Clone)]
pub struct DualPairSpec {
    pub name: String,
    pub eta: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub b: TwoTimeFn,
    pub sigma: TwoTimeFn,
    /// Free term of the dual equation; may read `W` through the path view.
    pub g: TerminalFn,
    /// `σ ≡ 0` and `g` does not depend on the path.
    pub deterministic: bool,
}

impl std::fmt::Debug for DualPairSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DualPairSpec")
            .field("name", &self.name)
            .field("deterministic", &self.deterministic)
            .finish()
    }
}

/// Names accepted by [`dual_pair`].
pub const DUAL_PAIRS: &[&str] = &["decoupled", "drift", "full"];

/// Shipped dual pairs, all with `η_t = 1 + t`.
///
/// * `decoupled`: `b = σ = 0`, `g(t) = cos t`.
/// * `drift`: `b = 0.5`, `σ = 0`, `g(t) = 1 − t/2`.
/// * `full`: `b(t, s) = 0.3 e^{−(t−s)}`, `σ = 0.4`, `g(t) = 1 − t/2 + 0.5 t W_T`.
pub fn dual_pair(name: &str) -> Result<DualPairSpec> {
    let eta: Arc<dyn Fn(f64) -> f64 + Send + Sync> = Arc::new(|t| 1.0 + t);
    let pair = match name {
        "decoupled" => DualPairSpec {
            name: name.into(),
            eta,
            b: Arc::new(|_, _| 0.0),
            sigma: Arc::new(|_, _| 0.0),
            g: Arc::new(|t, _| t.cos()),
            deterministic: true,
        },
        "drift" => DualPairSpec {
            name: name.into(),
            eta,
            b: Arc::new(|_, _| 0.5),
            sigma: Arc::new(|_, _| 0.0),
            g: Arc::new(|t, _| 1.0 - 0.5 * t),
            deterministic: true,
        },
        "full" => DualPairSpec {
            name: name.into(),
            eta,
            b: Arc::new(|t, s| 0.3 * (-(t - s)).exp()),
            sigma: Arc::new(|_, _| 0.4),
            g: Arc::new(|t, v| 1.0 - 0.5 * t + 0.5 * t * v.w_now()),
            deterministic: false,
        },
        _ => {
            return Err(Error::Unknown {
                kind: "dual pair",
                name: name.to_string(),
            })
        }
    };
    Ok(pair)
}

impl DualPairSpec {
    /// Forward dynamics `b(t, r) x_r`, `σ(t, r) x_r` together with the dual
    /// driver `b(r, t) y + σ(r, t) z2` and free term `g`.
    pub fn coefficients(&self) -> CoefficientSet {
        let (b, s) = (self.b.clone(), self.sigma.clone());
        let (bd, sd) = (self.b.clone(), self.sigma.clone());
        let mut c = CoefficientSet::new(
            &format!("dual/{}", self.name),
            Arc::new(move |t, r, v| b(t, r) * v.x_now()),
            Arc::new(move |t, r, v| s(t, r) * v.x_now()),
            Arc::new(move |t, r, _, y, _, z2| bd(r, t) * y + sd(r, t) * z2.unwrap_or(0.0)),
            self.g.clone(),
        );
        c.meta = Metadata {
            type2: true,
            ..Metadata::default()
        };
        c
    }

    /// `η` on the grid nodes.
    pub fn eta_path(&self, grid: &TimeGrid) -> Vec<f64> {
        grid.nodes().into_iter().map(|t| (self.eta)(t)).collect()
    }

    /// `Σ_k g(t_k) 𝒳_{t_k} Δ` by deterministic quadrature (deterministic
    /// pairs only).
    pub fn deterministic_pairing(&self, grid: &TimeGrid) -> Option<f64> {
        if !self.deterministic {
            return None;
        }
        let nn = grid.n_nodes();
        let times = grid.nodes();
        let dt = grid.dt();
        let zero = vec![0.0; nn];
        let view = PathView::new(&zero, &zero, dt);
        let mut x = vec![0.0; nn];
        let mut total = 0.0;
        for j in 0..nn {
            let mut acc = (self.eta)(times[j]);
            for k in 0..j {
                acc += (self.b)(times[j], times[k]) * x[k] * dt;
            }
            x[j] = acc;
            total += (self.g)(times[j], &view) * acc * dt;
        }
        Some(total)
    }
}

/// Two sides of the duality identity.
#[derive(Debug, Clone, PartialEq)]
pub struct DualityReport {
    /// `E[Σ_k g(t_k) 𝒳_{t_k} Δ]`.
    pub lhs: f64,
    /// `Σ_k η_{t_k} E[Y_{t_k}] Δ`.
    pub rhs: f64,
    pub stderr_lhs: f64,
    pub stderr_rhs: f64,
    /// `sqrt(stderr_lhs² + stderr_rhs²)`.
    pub stderr: f64,
    pub residual: f64,
    /// Quadrature value of both sides for deterministic pairs.
    pub exact: Option<f64>,
}

impl DualityReport {
    /// `residual ≤ k · stderr`, or `≤ abs_tol` when there is no sampling
    /// error.
    pub fn passes(&self, k: f64, abs_tol: f64) -> bool {
        self.residual <= (k * self.stderr).max(abs_tol)
    }
}

/// Simulates `𝒳`, solves the dual type-II equation along it and evaluates
/// both sides of the pairing.
pub fn duality_check(
    pair: &DualPairSpec,
    grid: &TimeGrid,
    bw: &BrownianBatch,
    opts: &BackwardOptions,
) -> Result<DualityReport> {
    let coeffs = pair.coefficients();
    let eta = pair.eta_path(grid);
    let fwd = simulate(&coeffs, grid, bw, &eta, ForwardOptions::default())?;
    let mut opts = *opts;
    opts.basis.include_brownian = true;
    let bwd = solve_type2(&coeffs, &fwd, bw, &opts)?;
    let nn = grid.n_nodes();
    let dt = grid.dt();
    let times = grid.nodes();
    let lhs_paths = exec::map_indexed(bw.n_paths(), |p| {
        let x = fwd.x.path(p);
        let view = PathView::new(x, bw.levels_of(p), dt);
        (0..nn).map(|k| (pair.g)(times[k], &view) * x[k] * dt).sum::<f64>()
    });
    let rhs_paths = exec::map_indexed(bw.n_paths(), |p| {
        let y = bwd.y.path(p);
        (0..nn).map(|k| eta[k] * y[k] * dt).sum::<f64>()
    });
    let (lhs, stderr_lhs) = exec::mean_stderr(&lhs_paths);
    let (rhs, stderr_rhs) = exec::mean_stderr(&rhs_paths);
    Ok(DualityReport {
        lhs,
        rhs,
        stderr_lhs,
        stderr_rhs,
        stderr: stderr_lhs.hypot(stderr_rhs),
        residual: (lhs - rhs).abs(),
        exact: pair.deterministic_pairing(grid),
    })
}
