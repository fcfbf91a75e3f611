//! Time discretization, seeded Brownian drivers and the path/two-time
//! storage shared by every solver.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;

/// Uniform grid `t_k = k T / N`, `k = 0..=N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "T must be positive and finite, got {horizon}"
            )));
        }
        if steps < 1 {
            return Err(Error::InvalidParameter("N must be ≥ 1".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of steps `N`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of nodes `N + 1`.
    pub fn n_nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    #[inline]
    pub fn t(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.horizon / self.steps as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.t(k)).collect()
    }
}

/// Shorthand for [`TimeGrid::new`].
pub fn make_grid(horizon: f64, steps: usize) -> Result<TimeGrid> {
    TimeGrid::new(horizon, steps)
}

/// SplitMix64 finalizer, used to derive independent child seeds.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    let mut z = master ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Brownian increments `ΔW[p][k][j]` on a grid, plus the cumulated levels.
///
/// Path `p` is drawn from its own ChaCha stream keyed by `(seed, p)`, so a
/// batch is bit-identical however it is generated.
#[derive(Debug, Clone)]
pub struct BrownianBatch {
    grid: TimeGrid,
    n_paths: usize,
    dim: usize,
    seed: u64,
    antithetic: bool,
    increments: Vec<f64>,
    levels: Vec<f64>,
}

impl BrownianBatch {
    /// Draws `n_paths` paths of a `dim`-dimensional Brownian motion. With
    /// `antithetic` the batch holds `2 n_paths` paths and path `p + n_paths`
    /// is the mirror image of path `p`.
    pub fn sample(
        grid: &TimeGrid,
        n_paths: usize,
        dim: usize,
        seed: u64,
        antithetic: bool,
    ) -> Result<Self> {
        if n_paths < 1 {
            return Err(Error::InvalidParameter("n_paths must be ≥ 1".into()));
        }
        if dim < 1 {
            return Err(Error::InvalidParameter("Brownian dimension must be ≥ 1".into()));
        }
        let n = grid.steps();
        let per_path = n * dim;
        let sd = grid.dt().sqrt();
        let mut increments = vec![0.0; n_paths * per_path];
        exec::for_each_chunk_mut(&mut increments, per_path, |p, row| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = sd * z;
            }
        });
        let total = if antithetic { 2 * n_paths } else { n_paths };
        if antithetic {
            increments.extend_from_within(..);
            for v in increments[n_paths * per_path..].iter_mut() {
                *v = -*v;
            }
        }
        let levels = Self::cumulate(&increments, total, n, dim);
        Ok(Self {
            grid: *grid,
            n_paths: total,
            dim,
            seed,
            antithetic,
            increments,
            levels,
        })
    }

    fn cumulate(increments: &[f64], n_paths: usize, n: usize, dim: usize) -> Vec<f64> {
        let mut levels = vec![0.0; n_paths * (n + 1) * dim];
        exec::for_each_chunk_mut(&mut levels, (n + 1) * dim, |p, row| {
            let inc = &increments[p * n * dim..(p + 1) * n * dim];
            for k in 0..n {
                for j in 0..dim {
                    row[(k + 1) * dim + j] = row[k * dim + j] + inc[k * dim + j];
                }
            }
        });
        levels
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Total number of paths (doubled when antithetic).
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn antithetic(&self) -> bool {
        self.antithetic
    }

    /// Increment vector `ΔW_k` of path `p`.
    #[inline]
    pub fn dw_vec(&self, p: usize, k: usize) -> &[f64] {
        let o = (p * self.grid.steps() + k) * self.dim;
        &self.increments[o..o + self.dim]
    }

    /// First component of `ΔW_k` on path `p`.
    #[inline]
    pub fn dw(&self, p: usize, k: usize) -> f64 {
        self.increments[(p * self.grid.steps() + k) * self.dim]
    }

    /// All increments of path `p` for a scalar driver.
    #[inline]
    pub fn increments_of(&self, p: usize) -> &[f64] {
        let n = self.grid.steps() * self.dim;
        &self.increments[p * n..(p + 1) * n]
    }

    /// Levels `W_{t_0..t_N}` of path `p` for a scalar driver.
    #[inline]
    pub fn levels_of(&self, p: usize) -> &[f64] {
        let n = self.grid.n_nodes() * self.dim;
        &self.levels[p * n..(p + 1) * n]
    }

    /// First component of `W_{t_k}` on path `p`.
    #[inline]
    pub fn level(&self, p: usize, k: usize) -> f64 {
        self.levels[(p * self.grid.n_nodes() + k) * self.dim]
    }

    pub(crate) fn require_scalar(&self) -> Result<()> {
        if self.dim != 1 {
            return Err(Error::Unsupported(format!(
                "solvers handle a scalar Brownian driver, got dimension {}",
                self.dim
            )));
        }
        Ok(())
    }
}

/// Shorthand for a non-antithetic [`BrownianBatch::sample`].
pub fn sample_brownian(grid: &TimeGrid, n_paths: usize, d: usize, seed: u64) -> Result<BrownianBatch> {
    BrownianBatch::sample(grid, n_paths, d, seed, false)
}

/// Scalar values per path and grid node, `values[p][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    n_paths: usize,
    n_nodes: usize,
    values: Vec<f64>,
}

impl PathBatch {
    pub fn zeros(n_paths: usize, n_nodes: usize) -> Self {
        Self {
            n_paths,
            n_nodes,
            values: vec![0.0; n_paths * n_nodes],
        }
    }

    pub fn from_vec(n_paths: usize, n_nodes: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_paths * n_nodes {
            return Err(Error::Dimension(format!(
                "expected {} values, got {}",
                n_paths * n_nodes,
                values.len()
            )));
        }
        Ok(Self {
            n_paths,
            n_nodes,
            values,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    #[inline]
    pub fn get(&self, p: usize, k: usize) -> f64 {
        self.values[p * self.n_nodes + k]
    }

    #[inline]
    pub fn set(&mut self, p: usize, k: usize, v: f64) {
        self.values[p * self.n_nodes + k] = v;
    }

    #[inline]
    pub fn path(&self, p: usize) -> &[f64] {
        &self.values[p * self.n_nodes..(p + 1) * self.n_nodes]
    }

    #[inline]
    pub fn path_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.values[p * self.n_nodes..(p + 1) * self.n_nodes]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Values at node `k` across paths.
    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.get(p, k)).collect()
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Which half of the `(i, j)` index square a [`TwoTimeField`] stores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    /// `j ≥ i`
    Upper,
    /// `j ≤ i`
    Lower,
}

impl Region {
    fn name(self) -> &'static str {
        match self {
            Region::Upper => "upper",
            Region::Lower => "lower",
        }
    }
}

/// Triangular two-index array per path. Row `i` of an upper field holds
/// `j = i..=N`, row `i` of a lower field holds `j = 0..=i`; both rows are
/// contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoTimeField {
    region: Region,
    n_nodes: usize,
    n_paths: usize,
    tri: usize,
    values: Vec<f64>,
}

impl TwoTimeField {
    pub fn new(region: Region, n_nodes: usize, n_paths: usize) -> Self {
        let tri = n_nodes * (n_nodes + 1) / 2;
        Self {
            region,
            n_nodes,
            n_paths,
            tri,
            values: vec![0.0; n_paths * tri],
        }
    }

    /// Bytes needed for a field of this shape.
    pub fn footprint_bytes(n_nodes: usize, n_paths: usize) -> usize {
        n_paths * n_nodes * (n_nodes + 1) / 2 * std::mem::size_of::<f64>()
    }

    pub fn region(&self) -> Region {
        self.region
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    /// Entries per path, `(N+1)(N+2)/2`.
    pub fn cells_per_path(&self) -> usize {
        self.tri
    }

    pub fn in_region(&self, i: usize, j: usize) -> bool {
        i < self.n_nodes
            && j < self.n_nodes
            && match self.region {
                Region::Upper => j >= i,
                Region::Lower => j <= i,
            }
    }

    #[inline]
    fn row_offset(&self, i: usize) -> usize {
        match self.region {
            Region::Upper => i * self.n_nodes - i * (i.saturating_sub(1)) / 2,
            Region::Lower => i * (i + 1) / 2,
        }
    }

    #[inline]
    fn row_len(&self, i: usize) -> usize {
        match self.region {
            Region::Upper => self.n_nodes - i,
            Region::Lower => i + 1,
        }
    }

    fn flat(&self, p: usize, i: usize, j: usize) -> Result<usize> {
        if p >= self.n_paths || !self.in_region(i, j) {
            return Err(Error::OutOfRegion {
                i,
                j,
                region: self.region.name(),
                nodes: self.n_nodes,
            });
        }
        let first = match self.region {
            Region::Upper => i,
            Region::Lower => 0,
        };
        Ok(p * self.tri + self.row_offset(i) + (j - first))
    }

    pub fn get(&self, p: usize, i: usize, j: usize) -> Result<f64> {
        Ok(self.values[self.flat(p, i, j)?])
    }

    pub fn set(&mut self, p: usize, i: usize, j: usize, v: f64) -> Result<()> {
        let idx = self.flat(p, i, j)?;
        self.values[idx] = v;
        Ok(())
    }

    /// Row `i` of path `p`: `j = i..=N` (upper) or `j = 0..=i` (lower).
    #[inline]
    pub fn row(&self, p: usize, i: usize) -> &[f64] {
        let o = p * self.tri + self.row_offset(i);
        &self.values[o..o + self.row_len(i)]
    }

    #[inline]
    pub fn row_mut(&mut self, p: usize, i: usize) -> &mut [f64] {
        let o = p * self.tri + self.row_offset(i);
        let len = self.row_len(i);
        &mut self.values[o..o + len]
    }

    /// All cells of path `p`.
    pub fn path_block(&self, p: usize) -> &[f64] {
        &self.values[p * self.tri..(p + 1) * self.tri]
    }

    pub(crate) fn path_block_mut(&mut self, p: usize) -> &mut [f64] {
        let tri = self.tri;
        &mut self.values[p * tri..(p + 1) * tri]
    }

    /// All cells, path after path.
    pub(crate) fn path_block_mut_all(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Row offset within a path block (crate-internal fast path).
    #[inline]
    pub(crate) fn local_offset(&self, i: usize, j: usize) -> usize {
        let first = match self.region {
            Region::Upper => i,
            Region::Lower => 0,
        };
        self.row_offset(i) + (j - first)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_nodes() {
        let g = make_grid(1.0, 4).unwrap();
        assert_eq!(g.nodes(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let g = make_grid(2.0, 1).unwrap();
        assert_eq!(g.nodes(), vec![0.0, 2.0]);
        assert_eq!(g.dt(), 2.0);
    }

    #[test]
    fn grid_rejects_bad_input() {
        let e = make_grid(1.0, 0).unwrap_err();
        assert!(e.to_string().contains("N must be ≥ 1"));
        assert!(make_grid(0.0, 4).is_err());
        assert!(make_grid(-1.0, 4).is_err());
        assert!(make_grid(f64::NAN, 4).is_err());
    }

    #[test]
    fn brownian_determinism() {
        let g = make_grid(1.0, 16).unwrap();
        let a = sample_brownian(&g, 100, 1, 42).unwrap();
        let b = exec::with_threads(1, || sample_brownian(&g, 100, 1, 42).unwrap());
        assert_eq!(a.increments, b.increments);
        let c = sample_brownian(&g, 100, 1, 43).unwrap();
        assert_ne!(a.increments, c.increments);
    }

    #[test]
    fn brownian_prefix_stability() {
        // Path p does not depend on how many other paths are drawn.
        let g = make_grid(1.0, 8).unwrap();
        let small = sample_brownian(&g, 5, 2, 9).unwrap();
        let big = sample_brownian(&g, 50, 2, 9).unwrap();
        for p in 0..5 {
            assert_eq!(small.increments_of(p), big.increments_of(p));
        }
    }

    #[test]
    fn antithetic_mirror() {
        let g = make_grid(1.0, 8).unwrap();
        let b = BrownianBatch::sample(&g, 10, 1, 3, true).unwrap();
        assert_eq!(b.n_paths(), 20);
        for p in 0..10 {
            for k in 0..8 {
                assert_eq!(b.dw(p + 10, k), -b.dw(p, k));
            }
        }
    }

    #[test]
    fn levels_cumulate_increments() {
        let g = make_grid(1.0, 8).unwrap();
        let b = sample_brownian(&g, 3, 1, 1).unwrap();
        for p in 0..3 {
            let mut w = 0.0;
            assert_eq!(b.level(p, 0), 0.0);
            for k in 0..8 {
                w += b.dw(p, k);
                assert_eq!(b.level(p, k + 1), w);
            }
        }
    }

    #[test]
    fn brownian_rejects_bad_input() {
        let g = make_grid(1.0, 8).unwrap();
        assert!(sample_brownian(&g, 0, 1, 1).is_err());
        assert!(sample_brownian(&g, 1, 0, 1).is_err());
    }

    #[test]
    fn triangular_layout() {
        for region in [Region::Upper, Region::Lower] {
            let mut f = TwoTimeField::new(region, 5, 2);
            assert_eq!(f.cells_per_path(), 15);
            let mut v = 0.0;
            for p in 0..2 {
                for i in 0..5 {
                    for j in 0..5 {
                        if f.in_region(i, j) {
                            f.set(p, i, j, v).unwrap();
                            v += 1.0;
                        } else {
                            assert!(f.set(p, i, j, 0.0).is_err());
                            assert!(f.get(p, i, j).is_err());
                        }
                    }
                }
            }
            // Cells are visited in storage order, so the payload is 0..30.
            let mut expect = 0.0;
            for p in 0..2 {
                for &x in f.path_block(p) {
                    assert_eq!(x, expect);
                    expect += 1.0;
                }
            }
        }
    }

    #[test]
    fn upper_rows_are_contiguous() {
        let mut f = TwoTimeField::new(Region::Upper, 4, 1);
        f.row_mut(0, 2).copy_from_slice(&[7.0, 8.0]);
        assert_eq!(f.get(0, 2, 2).unwrap(), 7.0);
        assert_eq!(f.get(0, 2, 3).unwrap(), 8.0);
        assert_eq!(f.row(0, 3).len(), 1);
        let l = TwoTimeField::new(Region::Lower, 4, 1);
        assert_eq!(l.row(0, 3).len(), 4);
    }
}
