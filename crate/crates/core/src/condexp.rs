//! Least-squares Monte Carlo conditional expectations.
//!
//! A [`Design`] holds polynomial features of the information available at
//! one time node; a [`Projector`] factors its ridge-regularized normal
//! matrix once and projects any number of targets. Cross-path sums are
//! accumulated in fixed blocks, so results do not depend on the worker count.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::exec;
use crate::forward::ForwardSolution;
use crate::grid::BrownianBatch;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisSpec {
    /// Highest pure power per variable.
    pub degree: usize,
    /// Pivot columns of the auxiliary row used as variables.
    pub pivots: usize,
    pub ridge: f64,
    pub include_constant: bool,
    /// Add pairwise products when `degree ≥ 2`.
    pub cross_terms: bool,
    /// Add the Brownian level `W_{t_k}` as a variable.
    pub include_brownian: bool,
    /// Add the running integral `∫_0^{t_k} X_r dr` as a variable.
    pub include_integral: bool,
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self {
            degree: 2,
            pivots: 4,
            ridge: 1e-8,
            include_constant: true,
            cross_terms: true,
            include_brownian: false,
            include_integral: true,
        }
    }
}

impl BasisSpec {
    pub fn validate(&self) -> Result<()> {
        if self.degree == 0 && !self.include_constant {
            return Err(Error::InvalidParameter("basis is empty".into()));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "ridge must be non-negative, got {}",
                self.ridge
            )));
        }
        Ok(())
    }
}

/// Standardized polynomial map from raw variables to features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// `(variable index, mean, standard deviation)` of the kept variables.
    kept: Vec<(usize, f64, f64)>,
    degree: usize,
    cross: bool,
    constant: bool,
    m: usize,
}

impl FeatureMap {
    /// Chooses the kept variables from sample columns `vars[v][p]`: constant
    /// columns and bitwise duplicates of an earlier column are dropped.
    pub fn fit(vars: &[Vec<f64>], basis: &BasisSpec) -> Result<Self> {
        basis.validate()?;
        let n = vars.first().map_or(0, Vec::len);
        if n == 0 {
            return Err(Error::Dimension("no samples".into()));
        }
        let mut kept: Vec<(usize, f64, f64)> = Vec::new();
        for (v, col) in vars.iter().enumerate() {
            if col.len() != n {
                return Err(Error::Dimension("feature columns differ in length".into()));
            }
            if col.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidParameter(format!("feature {v} has non-finite values")));
            }
            if kept.iter().any(|&(u, _, _)| vars[u] == *col) {
                continue;
            }
            let (mean, se) = exec::mean_stderr(col);
            let sd = se * (n as f64).sqrt();
            if !(sd > 1e-12 * (1.0 + mean.abs())) {
                continue;
            }
            kept.push((v, mean, sd));
        }
        let nv = kept.len();
        let cross = basis.cross_terms && basis.degree >= 2;
        let n_cross = if cross { nv * nv.saturating_sub(1) / 2 } else { 0 };
        let m = usize::from(basis.include_constant) + nv * basis.degree + n_cross;
        if m == 0 {
            return Err(Error::InvalidParameter("basis is empty".into()));
        }
        Ok(Self {
            kept,
            degree: basis.degree,
            cross,
            constant: basis.include_constant,
            m,
        })
    }

    pub fn n_features(&self) -> usize {
        self.m
    }

    pub fn intercept(&self) -> Option<usize> {
        self.constant.then_some(0)
    }

    /// Writes the features of one sample with raw variables `raw` to `out`.
    pub fn eval(&self, raw: &[f64], out: &mut [f64]) {
        let mut c = 0;
        if self.constant {
            out[0] = 1.0;
            c = 1;
        }
        let nv = self.kept.len();
        let mut buf = [0.0f64; 16];
        let mut heap = Vec::new();
        let z: &mut [f64] = if nv <= 16 {
            &mut buf[..nv]
        } else {
            heap.resize(nv, 0.0);
            &mut heap
        };
        for (a, &(v, mean, sd)) in self.kept.iter().enumerate() {
            z[a] = (raw[v] - mean) / sd;
        }
        for &za in z.iter() {
            let mut pw = 1.0;
            for _ in 0..self.degree {
                pw *= za;
                out[c] = pw;
                c += 1;
            }
        }
        if self.cross {
            for a in 0..nv {
                for b in a + 1..nv {
                    out[c] = z[a] * z[b];
                    c += 1;
                }
            }
        }
    }
}

/// Row-major `n × m` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub n: usize,
    pub m: usize,
    pub values: Vec<f64>,
    /// Column holding the constant, if any (not penalized).
    pub intercept: Option<usize>,
}

impl Design {
    pub fn new(n: usize, m: usize, values: Vec<f64>, intercept: Option<usize>) -> Result<Self> {
        if values.len() != n * m {
            return Err(Error::Dimension(format!(
                "feature matrix has {} entries, expected {n} × {m}",
                values.len()
            )));
        }
        Ok(Self {
            n,
            m,
            values,
            intercept,
        })
    }

    #[inline]
    pub fn row(&self, p: usize) -> &[f64] {
        &self.values[p * self.m..(p + 1) * self.m]
    }

    /// Features of `n` samples whose raw variables are produced by `raw`.
    pub fn from_map(map: &FeatureMap, n: usize, raw: impl Fn(usize, &mut Vec<f64>) + Sync + Send) -> Result<Self> {
        let m = map.n_features();
        let mut values = vec![0.0; n * m];
        exec::for_each_chunk_mut(&mut values, m, |p, row| {
            let mut r = Vec::new();
            raw(p, &mut r);
            map.eval(&r, row);
        });
        Design::new(n, m, values, map.intercept())
    }

    /// Polynomial features of the variables `vars[v][p]` (see [`FeatureMap`]).
    pub fn polynomial(vars: &[Vec<f64>], basis: &BasisSpec) -> Result<Self> {
        let map = FeatureMap::fit(vars, basis)?;
        let n = vars[0].len();
        Design::from_map(&map, n, |p, r| {
            r.clear();
            r.extend(vars.iter().map(|c| c[p]));
        })
    }
}

/// Raw regression variables at node `k` of path `p`: `X_{t_k}`, the pivot
/// columns of auxiliary row `k`, and optionally `W_{t_k}` and the running
/// integral of `X`.
pub fn raw_variables(fwd: &ForwardSolution, bw: &BrownianBatch, basis: &BasisSpec, p: usize, k: usize, out: &mut Vec<f64>) {
    out.clear();
    out.push(fwd.x.get(p, k));
    let np = basis.pivots.min(fwd.n_pivots);
    out.extend_from_slice(&fwd.pivots(p, k)[..np]);
    if basis.include_brownian {
        out.push(bw.level(p, k));
    }
    if basis.include_integral {
        out.push(fwd.integral.get(p, k));
    }
}

/// Feature map of node `k`.
pub fn time_feature_map(fwd: &ForwardSolution, bw: &BrownianBatch, k: usize, basis: &BasisSpec) -> Result<FeatureMap> {
    let n = fwd.n_paths();
    let mut first = Vec::new();
    raw_variables(fwd, bw, basis, 0, k, &mut first);
    let mut vars = vec![Vec::with_capacity(n); first.len()];
    let mut r = Vec::new();
    for p in 0..n {
        raw_variables(fwd, bw, basis, p, k, &mut r);
        for (v, x) in vars.iter_mut().zip(&r) {
            v.push(*x);
        }
    }
    FeatureMap::fit(&vars, basis)
}

/// Features of the information at node `k` of a forward solution.
pub fn time_design(fwd: &ForwardSolution, bw: &BrownianBatch, k: usize, basis: &BasisSpec) -> Result<Design> {
    let map = time_feature_map(fwd, bw, k, basis)?;
    Design::from_map(&map, fwd.n_paths(), |p, r| raw_variables(fwd, bw, basis, p, k, r))
}

#[derive(Debug, Clone)]
enum Factor {
    Cholesky(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Pinv(DMatrix<f64>),
}

/// Factored ridge-regularized normal matrix `ΦᵀΦ/n + λ I`.
#[derive(Debug, Clone)]
pub struct NormalFactor {
    n: usize,
    m: usize,
    factor: Factor,
    condition: f64,
}

impl NormalFactor {
    /// Accumulates the normal matrix of `n` feature rows written by `row`.
    pub fn from_rows(
        n: usize,
        m: usize,
        intercept: Option<usize>,
        ridge: f64,
        row: impl Fn(usize, &mut [f64]) + Sync + Send,
    ) -> Result<Self> {
        if n <= m {
            return Err(Error::InvalidParameter(format!(
                "regression needs more samples than features ({n} ≤ {m})"
            )));
        }
        let gram = exec::reduce_blocks(
            n,
            |lo, hi| {
                let mut g = vec![0.0; m * m];
                let mut r = vec![0.0; m];
                for p in lo..hi {
                    row(p, &mut r);
                    for a in 0..m {
                        let ra = r[a];
                        for b in a..m {
                            g[a * m + b] += ra * r[b];
                        }
                    }
                }
                g
            },
            add_vecs,
        )
        .unwrap_or_default();
        let mut a = DMatrix::<f64>::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let v = gram[i * m + j] / n as f64;
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
            if Some(i) != intercept {
                a[(i, i)] += ridge;
            }
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite normal matrix".into()));
        }
        let eig = a.clone().symmetric_eigen();
        let max = eig.eigenvalues.iter().fold(0.0f64, |x, &v| x.max(v.abs()));
        let min = eig.eigenvalues.iter().fold(f64::INFINITY, |x, &v| x.min(v));
        let condition = if min > 0.0 { max / min } else { f64::INFINITY };
        let factor = match (condition < 1e13).then(|| a.clone().cholesky()).flatten() {
            Some(c) => Factor::Cholesky(c),
            None => {
                let tol = max * m as f64 * f64::EPSILON * 1e3;
                let mut inv = DMatrix::<f64>::zeros(m, m);
                for (idx, &lam) in eig.eigenvalues.iter().enumerate() {
                    if lam > tol {
                        let v = eig.eigenvectors.column(idx);
                        inv += (v * v.transpose()) / lam;
                    }
                }
                Factor::Pinv(inv)
            }
        };
        Ok(Self {
            n,
            m,
            factor,
            condition,
        })
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn uses_pseudo_inverse(&self) -> bool {
        matches!(self.factor, Factor::Pinv(_))
    }

    /// Solves `A c = rhs / n` for an accumulated right-hand side.
    pub fn solve_sum(&self, rhs_sum: &[f64]) -> Result<Vec<f64>> {
        let b = DVector::from_iterator(self.m, rhs_sum.iter().map(|v| v / self.n as f64));
        let c = match &self.factor {
            Factor::Cholesky(c) => c.solve(&b),
            Factor::Pinv(inv) => inv * b,
        };
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite regression coefficients".into()));
        }
        Ok(c.iter().copied().collect())
    }

    /// `φᵀ A⁻¹ φ / n`.
    pub fn leverage(&self, phi: &[f64]) -> f64 {
        let b = DVector::from_column_slice(phi);
        let v = match &self.factor {
            Factor::Cholesky(c) => c.solve(&b),
            Factor::Pinv(inv) => inv * b,
        };
        dot(phi, v.as_slice()) / self.n as f64
    }
}

fn add_vecs(mut x: Vec<f64>, y: Vec<f64>) -> Vec<f64> {
    for (a, b) in x.iter_mut().zip(&y) {
        *a += b;
    }
    x
}

/// Design together with its factored normal equations.
#[derive(Debug, Clone)]
pub struct Projector {
    design: Design,
    factor: NormalFactor,
}

impl Projector {
    pub fn new(design: Design, ridge: f64) -> Result<Self> {
        let m = design.m;
        let factor = NormalFactor::from_rows(design.n, m, design.intercept, ridge, |p, r| {
            r.copy_from_slice(design.row(p))
        })?;
        Ok(Self { design, factor })
    }

    /// Reuses an existing factorization of the same design.
    pub fn with_factor(design: Design, factor: NormalFactor) -> Result<Self> {
        if factor.n != design.n || factor.m != design.m {
            return Err(Error::Dimension("factor does not match design".into()));
        }
        Ok(Self { design, factor })
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    pub fn factor(&self) -> &NormalFactor {
        &self.factor
    }

    pub fn n_features(&self) -> usize {
        self.design.m
    }

    pub fn condition(&self) -> f64 {
        self.factor.condition
    }

    pub fn uses_pseudo_inverse(&self) -> bool {
        self.factor.uses_pseudo_inverse()
    }

    /// Regression coefficients of each target.
    pub fn coefficients_many(&self, targets: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let (n, m) = (self.design.n, self.design.m);
        let nt = targets.len();
        if nt == 0 {
            return Ok(Vec::new());
        }
        for t in targets {
            if t.len() != n {
                return Err(Error::Dimension(format!("target has {} values, design has {n}", t.len())));
            }
        }
        let rhs = exec::reduce_blocks(
            n,
            |lo, hi| {
                let mut acc = vec![0.0; nt * m];
                for p in lo..hi {
                    let r = self.design.row(p);
                    for (ti, t) in targets.iter().enumerate() {
                        let y = t[p];
                        for (x, f) in acc[ti * m..(ti + 1) * m].iter_mut().zip(r) {
                            *x += f * y;
                        }
                    }
                }
                acc
            },
            add_vecs,
        )
        .unwrap_or_default();
        (0..nt).map(|ti| self.factor.solve_sum(&rhs[ti * m..(ti + 1) * m])).collect()
    }

    /// Fitted values `φ(p) · coef`.
    pub fn predict(&self, coef: &[f64]) -> Vec<f64> {
        exec::map_indexed(self.design.n, |p| dot(self.design.row(p), coef))
    }

    /// Projects every target; returns the fitted values in the same order.
    pub fn project_many(&self, targets: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let coefs = self.coefficients_many(targets)?;
        Ok(coefs.iter().map(|c| self.predict(c)).collect())
    }

    pub fn project(&self, target: &[f64]) -> Result<Vec<f64>> {
        Ok(self.project_many(&[target])?.pop().unwrap_or_default())
    }

    /// Leverage `φ(p)ᵀ A⁻¹ φ(p) / n` of sample `p`.
    pub fn leverage(&self, p: usize) -> f64 {
        self.factor.leverage(self.design.row(p))
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Result of a one-shot regression.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    pub coefficients: Vec<f64>,
    /// Mean squared residual.
    pub residual_second_moment: f64,
    pub condition: f64,
    pub pseudo_inverse: bool,
}

/// Ridge least squares of `targets` on the columns of `design`.
pub fn fit(design: &Design, targets: &[f64], ridge: f64) -> Result<RegressionFit> {
    if targets.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("targets have non-finite values".into()));
    }
    if design.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("features have non-finite values".into()));
    }
    let proj = Projector::new(design.clone(), ridge)?;
    let coefficients = proj.coefficients_many(&[targets])?.pop().unwrap_or_default();
    let pred = proj.predict(&coefficients);
    let res: Vec<f64> = pred.iter().zip(targets).map(|(a, b)| (b - a) * (b - a)).collect();
    Ok(RegressionFit {
        residual_second_moment: exec::ordered_sum(&res) / targets.len() as f64,
        coefficients,
        condition: proj.condition(),
        pseudo_inverse: proj.uses_pseudo_inverse(),
    })
}

/// Evaluates a fit on a design.
pub fn project(fit: &RegressionFit, design: &Design) -> Result<Vec<f64>> {
    if fit.coefficients.len() != design.m {
        return Err(Error::Dimension(format!(
            "fit has {} coefficients, design has {} features",
            fit.coefficients.len(),
            design.m
        )));
    }
    Ok(exec::map_indexed(design.n, |p| dot(design.row(p), &fit.coefficients)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, sample_brownian};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn raw_design(cols: &[Vec<f64>], intercept: bool) -> Design {
        let n = cols[0].len();
        let m = cols.len() + usize::from(intercept);
        let mut v = Vec::with_capacity(n * m);
        for p in 0..n {
            if intercept {
                v.push(1.0);
            }
            for c in cols {
                v.push(c[p]);
            }
        }
        Design::new(n, m, v, intercept.then_some(0)).unwrap()
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn exact_linear_target() {
        let x = noise(500, 1);
        let d = raw_design(&[x.clone()], false);
        let t: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        let f = fit(&d, &t, 1e-12).unwrap();
        assert!((f.coefficients[0] - 3.0).abs() < 1e-10);
        assert!(f.residual_second_moment.sqrt() < 1e-10);
    }

    #[test]
    fn constant_target() {
        let x = noise(300, 2);
        let d = raw_design(&[x], true);
        let f = fit(&d, &vec![2.5; 300], 1e-8).unwrap();
        for v in project(&f, &d).unwrap() {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn martingale_slope() {
        let g = make_grid(1.0, 16).unwrap();
        let n = 20_000;
        let bw = sample_brownian(&g, n, 1, 5).unwrap();
        let k = 8;
        let wk: Vec<f64> = (0..n).map(|p| bw.level(p, k)).collect();
        let wt: Vec<f64> = (0..n).map(|p| bw.level(p, 16)).collect();
        let d = raw_design(&[wk.clone()], true);
        let f = fit(&d, &wt, 0.0).unwrap();
        // slope standard error: sd(residual) / (sd(W_k) √n)
        let se = (0.5f64 / (0.5 * n as f64)).sqrt();
        assert!((f.coefficients[1] - 1.0).abs() < 3.0 * se, "{:?}", f.coefficients);
    }

    #[test]
    fn residuals_are_orthogonal() {
        let x = noise(2000, 3);
        let z = noise(2000, 4);
        let d = Design::polynomial(&[x.clone(), z.clone()], &BasisSpec { ridge: 0.0, ..BasisSpec::default() }).unwrap();
        let t: Vec<f64> = x.iter().zip(&z).map(|(a, b)| (3.0 * a).sin() + b.exp()).collect();
        let f = fit(&d, &t, 0.0).unwrap();
        let pred = project(&f, &d).unwrap();
        let res: Vec<f64> = t.iter().zip(&pred).map(|(a, b)| a - b).collect();
        for j in 1..d.m {
            let col: Vec<f64> = (0..d.n).map(|p| d.row(p)[j]).collect();
            let c = corr(&res, &col);
            assert!(c.abs() < 1e-8, "feature {j}: {c}");
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm(&pred) <= norm(&t));
    }

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn too_few_samples() {
        let d = raw_design(&[vec![1.0, 2.0], vec![0.5, 0.1]], true);
        assert!(fit(&d, &[1.0, 2.0], 0.0).is_err());
    }

    #[test]
    fn non_finite_inputs() {
        let d = raw_design(&[noise(10, 1)], true);
        let mut t = vec![0.0; 10];
        t[3] = f64::NAN;
        assert!(fit(&d, &t, 0.0).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let d = raw_design(&[noise(10, 1)], true);
        let f = fit(&d, &noise(10, 2), 0.0).unwrap();
        let d3 = raw_design(&[noise(10, 1), noise(10, 3)], true);
        assert!(project(&f, &d3).is_err());
    }

    #[test]
    fn duplicates_and_constants_are_dropped() {
        let x = noise(100, 1);
        let d = Design::polynomial(&[x.clone(), x.clone(), vec![4.0; 100]], &BasisSpec::default()).unwrap();
        assert_eq!(d.m, 3);
        let only_const = Design::polynomial(&[vec![1.0; 100]], &BasisSpec::default()).unwrap();
        assert_eq!(only_const.m, 1);
    }

    #[test]
    fn singular_design_uses_pseudo_inverse() {
        let x = noise(200, 7);
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let d = raw_design(&[x.clone(), y], true);
        let p = Projector::new(d, 0.0).unwrap();
        assert!(p.uses_pseudo_inverse());
        let t: Vec<f64> = x.iter().map(|v| 1.0 + v).collect();
        let pred = p.project(&t).unwrap();
        for (a, b) in pred.iter().zip(&t) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn worker_count_invariance() {
        let x = noise(9000, 8);
        let z = noise(9000, 9);
        let t: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a * b + a.cos()).collect();
        let run = || {
            let d = Design::polynomial(&[x.clone(), z.clone()], &BasisSpec::default()).unwrap();
            Projector::new(d, 1e-8).unwrap().project(&t).unwrap()
        };
        let a = exec::with_threads(1, run);
        let b = exec::with_threads(3, run);
        assert_eq!(a, b);
    }
}
