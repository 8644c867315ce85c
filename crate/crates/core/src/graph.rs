//! Pixel neighbourhood graphs and their Laplacians for the graph-regularised
//! solvers.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UnmixError};
use crate::model::HyperCube;

/// Pixels processed per block when computing spectral distances.
const DISTANCE_BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    /// k nearest neighbours over all pixels by spectral distance.
    Spectral,
    /// k nearest neighbours among pixels within `spatial_radius` on the grid.
    SpectralSpatial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphSpec {
    pub mode: GraphMode,
    pub k_neighbors: usize,
    /// Heat-kernel bandwidth; `None` uses the median neighbour distance.
    pub sigma_w: Option<f64>,
    /// Chebyshev radius on the pixel grid, used by `SpectralSpatial`.
    pub spatial_radius: usize,
}

impl Default for GraphSpec {
    fn default() -> Self {
        Self {
            mode: GraphMode::Spectral,
            k_neighbors: 8,
            sigma_w: None,
            spatial_radius: 2,
        }
    }
}

impl GraphSpec {
    pub fn spectral() -> Self {
        Self::default()
    }

    pub fn spectral_spatial() -> Self {
        Self {
            mode: GraphMode::SpectralSpatial,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors == 0 {
            return Err(UnmixError::InvalidParameter("k_neighbors must be at least 1".into()));
        }
        if let Some(s) = self.sigma_w {
            if !(s > 0.0 && s.is_finite()) {
                return Err(UnmixError::InvalidParameter(format!(
                    "heat-kernel bandwidth must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Symmetric sparse weight matrix `W`, its degree matrix `D` and the
/// Laplacian `L = D - W`, kept implicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianPair {
    adjacency: Vec<Vec<(usize, f64)>>,
    degree: Vec<f64>,
}

impl LaplacianPair {
    /// Builds the pair from undirected weighted edges. Duplicate edges keep
    /// the larger weight; self loops are rejected.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut maps: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for &(i, j, w) in edges {
            if i >= n || j >= n {
                return Err(UnmixError::Shape(format!("edge ({i}, {j}) outside {n} nodes")));
            }
            if i == j {
                return Err(UnmixError::InvalidData(format!("self loop on node {i}")));
            }
            if !(w >= 0.0 && w.is_finite()) {
                return Err(UnmixError::InvalidData(format!("edge weight {w}")));
            }
            for (a, b) in [(i, j), (j, i)] {
                let e = maps[a].entry(b).or_insert(w);
                *e = e.max(w);
            }
        }
        let adjacency: Vec<Vec<(usize, f64)>> = maps.into_iter().map(|m| m.into_iter().collect()).collect();
        let degree = adjacency.iter().map(|row| row.iter().map(|&(_, w)| w).sum()).collect();
        Ok(Self { adjacency, degree })
    }

    pub fn nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn degree(&self) -> &[f64] {
        &self.degree
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adjacency[i]
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[i]
            .binary_search_by_key(&j, |&(c, _)| c)
            .map(|p| self.adjacency[i][p].1)
            .unwrap_or(0.0)
    }

    /// `A W` for a `K x N` matrix `A`.
    pub fn right_multiply_w(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(a.nrows(), a.ncols());
        for (n, row) in self.adjacency.iter().enumerate() {
            let mut col = out.column_mut(n);
            for &(j, w) in row {
                col.axpy(w, &a.column(j), 1.0);
            }
        }
        out
    }

    /// `A D`.
    pub fn right_multiply_d(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = a.clone();
        for (n, mut col) in out.column_iter_mut().enumerate() {
            col *= self.degree[n];
        }
        out
    }

    /// `v^T L v`.
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        let mut total = 0.0;
        for (i, row) in self.adjacency.iter().enumerate() {
            total += self.degree[i] * v[i] * v[i];
            for &(j, w) in row {
                total -= w * v[i] * v[j];
            }
        }
        total
    }

    /// `Tr(A L A^T)`.
    pub fn trace_form(&self, a: &DMatrix<f64>) -> f64 {
        (0..a.nrows())
            .map(|k| {
                let row: Vec<f64> = a.row(k).iter().copied().collect();
                self.quadratic_form(&row)
            })
            .sum()
    }

    /// Row sums of `L`; zero up to rounding.
    pub fn laplacian_row_sums(&self) -> Vec<f64> {
        self.adjacency
            .iter()
            .zip(&self.degree)
            .map(|(row, d)| d - row.iter().map(|&(_, w)| w).sum::<f64>())
            .collect()
    }

    pub fn dense_weights(&self) -> DMatrix<f64> {
        let n = self.nodes();
        let mut w = DMatrix::zeros(n, n);
        for (i, row) in self.adjacency.iter().enumerate() {
            for &(j, v) in row {
                w[(i, j)] = v;
            }
        }
        w
    }

    pub fn dense_laplacian(&self) -> DMatrix<f64> {
        let mut l = -self.dense_weights();
        for (i, d) in self.degree.iter().enumerate() {
            l[(i, i)] += d;
        }
        l
    }
}

fn sq_dist(x: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    x.column(i)
        .iter()
        .zip(x.column(j).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// k nearest (distance, index) pairs, ties broken by lower index.
fn take_nearest(mut cands: Vec<(f64, usize)>, k: usize) -> Vec<(f64, usize)> {
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if cands.len() > k {
        cands.select_nth_unstable_by(k - 1, cmp);
        cands.truncate(k);
    }
    cands.sort_by(cmp);
    cands
}

fn spectral_neighbors(x: &DMatrix<f64>, k: usize) -> Vec<Vec<usize>> {
    let n = x.ncols();
    let norms: Vec<f64> = x.column_iter().map(|c| c.norm_squared()).collect();
    let mut out = Vec::with_capacity(n);
    let xt = x.transpose();
    for start in (0..n).step_by(DISTANCE_BLOCK) {
        let len = DISTANCE_BLOCK.min(n - start);
        // (len x N) block of inner products
        let gram = xt.rows(start, len) * x;
        for r in 0..len {
            let i = start + r;
            let cands = (0..n)
                .filter(|&j| j != i)
                .map(|j| ((norms[i] + norms[j] - 2.0 * gram[(r, j)]).max(0.0), j))
                .collect();
            out.push(take_nearest(cands, k).into_iter().map(|(_, j)| j).collect());
        }
    }
    out
}

fn spatial_neighbors(cube: &HyperCube, k: usize, radius: usize) -> Vec<Vec<usize>> {
    let x = cube.data();
    let (rows, cols) = (cube.rows(), cube.cols());
    let mut out = Vec::with_capacity(cube.pixels());
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            let mut cands = Vec::new();
            for rr in r.saturating_sub(radius)..=(r + radius).min(rows - 1) {
                for cc in c.saturating_sub(radius)..=(c + radius).min(cols - 1) {
                    let j = rr * cols + cc;
                    if j != i {
                        cands.push((sq_dist(x, i, j), j));
                    }
                }
            }
            out.push(take_nearest(cands, k).into_iter().map(|(_, j)| j).collect());
        }
    }
    out
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len().is_multiple_of(2) {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    })
}

/// Heat-kernel k-NN graph: `W_ij = exp(-||x_i - x_j||^2 / sigma_w^2)` for
/// `j` among the nearest neighbours of `i`, symmetrised by max.
pub fn build_graph(cube: &HyperCube, spec: &GraphSpec) -> Result<LaplacianPair> {
    spec.validate()?;
    let n = cube.pixels();
    if n < spec.k_neighbors + 1 {
        return Err(UnmixError::InvalidParameter(format!(
            "{n} pixels cannot supply {} neighbours",
            spec.k_neighbors
        )));
    }
    let x = cube.data();
    let neighbors = match spec.mode {
        GraphMode::Spectral => spectral_neighbors(x, spec.k_neighbors),
        GraphMode::SpectralSpatial => spatial_neighbors(cube, spec.k_neighbors, spec.spatial_radius),
    };

    let mut pairs = Vec::new();
    for (i, nbrs) in neighbors.iter().enumerate() {
        for &j in nbrs {
            pairs.push((i, j, sq_dist(x, i, j)));
        }
    }

    let sigma = match spec.sigma_w {
        Some(s) => Some(s),
        None => median(pairs.iter().map(|p| p.2.sqrt()).filter(|&d| d > 0.0).collect()),
    };
    let edges: Vec<(usize, usize, f64)> = match sigma {
        Some(s) => pairs
            .into_iter()
            .map(|(i, j, d2)| (i, j, (-d2 / (s * s)).exp()))
            .collect(),
        None => {
            warn!("all neighbouring pixels are identical; using uniform graph weights");
            pairs.into_iter().map(|(i, j, _)| (i, j, 1.0)).collect()
        }
    };
    LaplacianPair::from_edges(n, &edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cube(l: usize, rows: usize, cols: usize, seed: u64) -> HyperCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(l, rows * cols, |_, _| rng.random_range(0.0..1.0));
        HyperCube::new(x, rows, cols).unwrap()
    }

    #[test]
    fn identical_pixels_get_unit_weight() {
        let mut x = DMatrix::from_fn(4, 6, |i, j| (i * 7 + j * 3) as f64 * 0.05);
        let c0 = x.column(0).into_owned();
        x.set_column(3, &c0);
        let g = build_graph(
            &HyperCube::from_matrix(x).unwrap(),
            &GraphSpec {
                k_neighbors: 2,
                ..GraphSpec::spectral()
            },
        )
        .unwrap();
        assert_eq!(g.weight(0, 3), 1.0);
    }

    #[test]
    fn laplacian_is_psd_with_constant_null_space() {
        let cube = random_cube(5, 6, 6, 1);
        let g = build_graph(&cube, &GraphSpec::spectral()).unwrap();
        assert!(g.laplacian_row_sums().iter().all(|v| v.abs() < 1e-10));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let v: Vec<f64> = (0..36).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q = g.quadratic_form(&v);
            let mut half = 0.0;
            for i in 0..36 {
                for &(j, w) in g.neighbors(i) {
                    half += 0.5 * w * (v[i] - v[j]).powi(2);
                }
            }
            assert!(q >= 0.0);
            assert!((q - half).abs() < 1e-10);
        }
    }

    #[test]
    fn weights_symmetric_zero_diagonal() {
        let cube = random_cube(5, 5, 5, 2);
        for spec in [GraphSpec::spectral(), GraphSpec::spectral_spatial()] {
            let w = build_graph(&cube, &spec).unwrap().dense_weights();
            assert_eq!(w, w.transpose());
            assert!(w.diagonal().iter().all(|&v| v == 0.0));
            assert!(w.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn chain_spatial_graph_has_two_edges() {
        let x = DMatrix::from_row_slice(2, 3, &[0.1, 0.5, 0.9, 0.3, 0.2, 0.6]);
        let cube = HyperCube::new(x, 1, 3).unwrap();
        let spec = GraphSpec {
            mode: GraphMode::SpectralSpatial,
            k_neighbors: 1,
            sigma_w: None,
            spatial_radius: 1,
        };
        let g = build_graph(&cube, &spec).unwrap();
        assert_eq!(g.edge_count(), 2);
        assert!(g.weight(0, 1) > 0.0 && g.weight(1, 2) > 0.0);
        assert_eq!(g.weight(0, 2), 0.0);
    }

    #[test]
    fn brute_force_knn_agrees() {
        let cube = random_cube(3, 4, 5, 3);
        let spec = GraphSpec {
            k_neighbors: 3,
            ..GraphSpec::spectral()
        };
        let g = build_graph(&cube, &spec).unwrap();
        let x = cube.data();
        for i in 0..20 {
            let mut d: Vec<(f64, usize)> = (0..20)
                .filter(|&j| j != i)
                .map(|j| ((x.column(i) - x.column(j)).norm_squared(), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0));
            for &(_, j) in &d[..3] {
                assert!(g.weight(i, j) > 0.0, "missing edge {i}-{j}");
            }
        }
    }

    #[test]
    fn all_identical_pixels_uniform_weights() {
        let cube = HyperCube::from_matrix(DMatrix::from_element(3, 5, 0.4)).unwrap();
        let g = build_graph(
            &cube,
            &GraphSpec {
                k_neighbors: 2,
                ..GraphSpec::spectral()
            },
        )
        .unwrap();
        for i in 0..5 {
            assert!(g.neighbors(i).iter().all(|&(_, w)| w == 1.0));
        }
    }

    #[test]
    fn multiplications_match_dense() {
        let cube = random_cube(4, 4, 4, 4);
        let g = build_graph(&cube, &GraphSpec::spectral_spatial()).unwrap();
        let a = DMatrix::from_fn(3, 16, |i, j| ((i + 1) * (j + 2)) as f64 * 0.01);
        assert!((g.right_multiply_w(&a) - &a * g.dense_weights()).abs().max() < 1e-12);
        let trace = (&a * g.dense_laplacian() * a.transpose()).trace();
        assert!((g.trace_form(&a) - trace).abs() < 1e-12);
    }

    #[test]
    fn too_few_pixels_rejected() {
        let cube = random_cube(3, 1, 4, 5);
        assert!(build_graph(&cube, &GraphSpec::spectral()).is_err());
        let bad = GraphSpec {
            sigma_w: Some(0.0),
            ..GraphSpec::spectral()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn relabeling_permutes_weights(seed in 0u64..1000) {
            let cube = random_cube(3, 1, 12, seed);
            let spec = GraphSpec { k_neighbors: 3, sigma_w: Some(0.5), ..GraphSpec::spectral() };
            let g = build_graph(&cube, &spec).unwrap().dense_weights();
            let perm: Vec<usize> = (0..12).rev().collect();
            let x = cube.data();
            let xp = DMatrix::from_columns(&perm.iter().map(|&j| x.column(j)).collect::<Vec<_>>());
            let gp = build_graph(&HyperCube::from_matrix(xp).unwrap(), &spec).unwrap().dense_weights();
            for a in 0..12 {
                for b in 0..12 {
                    prop_assert!((gp[(a, b)] - g[(perm[a], perm[b])]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn trace_regularizer_nonnegative(vals in proptest::collection::vec(0.0f64..1.0, 3 * 16)) {
            let cube = random_cube(4, 4, 4, 17);
            let g = build_graph(&cube, &GraphSpec::spectral()).unwrap();
            let a = DMatrix::from_vec(3, 16, vals);
            prop_assert!(g.trace_form(&a) >= -1e-12);
        }
    }
}
