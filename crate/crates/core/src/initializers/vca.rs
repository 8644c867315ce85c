use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, UnmixError};
use crate::linalg::{centered, column_mean, sorted_symmetric_eigen};
use crate::model::{EndmemberMatrix, HyperCube};

/// Relative eigenvalue threshold below which a direction is treated as
/// absent from the data subspace.
const RANK_TOL: f64 = 1e-10;

/// Which subspace projection VCA used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VcaBranch {
    /// Projective projection onto the leading `K` directions (high SNR).
    Projective,
    /// Mean-removed PCA projection onto `K - 1` directions (low SNR, or the
    /// SNR estimate was unusable).
    Pca,
}

#[derive(Debug, Clone)]
pub struct VcaOutput {
    pub endmembers: EndmemberMatrix,
    pub indices: Vec<usize>,
    pub branch: VcaBranch,
    /// Estimated SNR in dB; `inf` for noise-free data, `NaN` when unusable.
    pub snr_estimate: f64,
}

/// Vertex component analysis. Returns `K` data columns chosen as
/// successive extremes of random projections orthogonal to the span of the
/// columns already picked, together with their pixel indices.
pub fn vca(cube: &HyperCube, k: usize, seed: u64) -> Result<(EndmemberMatrix, Vec<usize>)> {
    let out = vca_detailed(cube, k, seed)?;
    Ok((out.endmembers, out.indices))
}

pub fn vca_detailed(cube: &HyperCube, k: usize, seed: u64) -> Result<VcaOutput> {
    let r = cube.data();
    let (l, n) = r.shape();
    if k < 2 || k > l.min(n) {
        return Err(UnmixError::InvalidParameter(format!(
            "endmember count {k} must lie in [2, {}]",
            l.min(n)
        )));
    }
    let nf = n as f64;

    let (eig_raw, u_raw) = sorted_symmetric_eigen(r * r.transpose() / nf);
    let top = eig_raw[0].max(0.0);
    let rank = eig_raw.iter().filter(|&&v| v > RANK_TOL * top).count();
    if top <= 0.0 || rank < k {
        return Err(UnmixError::DegenerateSubspace { rank, requested: k });
    }

    let mean = column_mean(r);
    let r_o = centered(r, &mean);
    let (_, u_cen) = sorted_symmetric_eigen(&r_o * r_o.transpose() / nf);
    let u_k = u_cen.columns(0, k).into_owned();
    let x_p = u_k.tr_mul(&r_o);

    let p_y = r.norm_squared() / nf;
    let p_x = x_p.norm_squared() / nf + mean.norm_squared();
    let noise = p_y - p_x;
    let signal = p_x - (k as f64 / l as f64) * p_y;
    let snr = if noise <= 1e-12 * p_y {
        f64::INFINITY
    } else if signal <= 0.0 {
        f64::NAN
    } else {
        10.0 * (signal / noise).log10()
    };
    let threshold = 15.0 + 10.0 * (k as f64).log10();

    let projective = if snr.is_nan() || snr < threshold {
        None
    } else {
        projective_coordinates(r, &u_raw, k)
    };
    let (y, branch) = match projective {
        Some(y) => (y, VcaBranch::Projective),
        None => (pca_coordinates(&r_o, &u_cen, k), VcaBranch::Pca),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis = DMatrix::<f64>::zeros(k, k);
    basis[(k - 1, 0)] = 1.0;
    let mut indices = Vec::with_capacity(k);
    for i in 0..k {
        let w = DVector::from_fn(k, |_, _| StandardNormal.sample(&mut rng));
        let pinv = basis
            .clone()
            .pseudo_inverse(1e-12)
            .map_err(|e| UnmixError::InvalidData(e.to_string()))?;
        let mut f = &w - &basis * (pinv * &w);
        let norm = f.norm();
        if norm > 0.0 {
            f /= norm;
        }
        let v = f.tr_mul(&y);
        let mut best = 0usize;
        let mut best_val = f64::NEG_INFINITY;
        for (j, val) in v.iter().enumerate() {
            let a = val.abs();
            if a > best_val {
                best_val = a;
                best = j;
            }
        }
        basis.set_column(i, &y.column(best));
        indices.push(best);
    }

    let cols: Vec<_> = indices.iter().map(|&j| r.column(j).map(|v| v.max(0.0))).collect();
    let endmembers = EndmemberMatrix::new(DMatrix::from_columns(&cols))?;
    Ok(VcaOutput {
        endmembers,
        indices,
        branch,
        snr_estimate: snr,
    })
}

/// `y_n = x_n / <mean(x), x_n>` in the leading `K`-dimensional subspace.
fn projective_coordinates(r: &DMatrix<f64>, u_raw: &DMatrix<f64>, k: usize) -> Option<DMatrix<f64>> {
    let x = u_raw.columns(0, k).tr_mul(r);
    let u = column_mean(&x);
    let mut y = x;
    for mut col in y.column_iter_mut() {
        let scale = u.dot(&col);
        if !(scale > f64::MIN_POSITIVE) {
            return None;
        }
        col /= scale;
    }
    Some(y)
}

/// Mean-removed `K - 1` PCA coordinates lifted by a constant last row equal
/// to the largest coordinate norm.
fn pca_coordinates(r_o: &DMatrix<f64>, u_cen: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let x = u_cen.columns(0, k - 1).tr_mul(r_o);
    let c = x.column_iter().map(|col| col.norm()).fold(0.0, f64::max);
    let mut y = x.resize_vertically(k, c);
    y.row_mut(k - 1).fill(c);
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn pure_plus_mixtures(l: usize, k: usize, n_mixed: usize, seed: u64) -> (DMatrix<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(l, k, |_, _| rng.random_range(0.1..1.0));
        let n = k + n_mixed;
        // pure pixels sit at scattered positions
        let pure: Vec<usize> = (0..k).map(|i| i * (n / k) + 1).collect();
        let mut x = DMatrix::zeros(l, n);
        for j in 0..n {
            let a = if let Some(e) = pure.iter().position(|&p| p == j) {
                DVector::from_fn(k, |i, _| if i == e { 1.0 } else { 0.0 })
            } else {
                let raw = DVector::from_fn(k, |_, _| rng.random_range(0.2..1.0));
                let s = raw.sum();
                raw / s
            };
            x.set_column(j, &(&m * a));
        }
        (x, pure)
    }

    #[test]
    fn picks_pure_pixels_projective() {
        let (x, pure) = pure_plus_mixtures(8, 3, 17, 3);
        let cube = HyperCube::from_matrix(x).unwrap();
        let out = vca_detailed(&cube, 3, 11).unwrap();
        let mut got = out.indices.clone();
        got.sort();
        assert_eq!(got, pure);
        assert_eq!(out.branch, VcaBranch::Projective);
    }

    #[test]
    fn output_columns_are_data_columns() {
        let (x, _) = pure_plus_mixtures(10, 4, 40, 5);
        let cube = HyperCube::from_matrix(x.clone()).unwrap();
        let (m, idx) = vca(&cube, 4, 1).unwrap();
        for (c, &j) in idx.iter().enumerate() {
            assert_eq!(m.data().column(c), x.column(j));
        }
    }

    #[test]
    fn same_seed_same_selection() {
        let (x, _) = pure_plus_mixtures(10, 4, 40, 9);
        let cube = HyperCube::from_matrix(x).unwrap();
        assert_eq!(vca(&cube, 4, 7).unwrap(), vca(&cube, 4, 7).unwrap());
    }

    #[test]
    fn duplicates_are_not_selected_twice() {
        let (mut x, pure) = pure_plus_mixtures(6, 3, 12, 21);
        let dup = x.column(pure[0]).into_owned();
        let n = x.ncols();
        x = x.insert_column(n, 0.0);
        let last = x.ncols() - 1;
        x.set_column(last, &dup);
        let cube = HyperCube::from_matrix(x.clone()).unwrap();
        for seed in 0..5 {
            let (m, _) = vca(&cube, 3, seed).unwrap();
            let rank = m.data().clone().svd(false, false).rank(1e-9);
            assert_eq!(rank, 3);
        }
    }

    #[test]
    fn range_and_rank_errors() {
        let (x, _) = pure_plus_mixtures(6, 3, 12, 2);
        let cube = HyperCube::from_matrix(x).unwrap();
        assert!(matches!(vca(&cube, 1, 0), Err(UnmixError::InvalidParameter(_))));
        assert!(matches!(vca(&cube, 7, 0), Err(UnmixError::InvalidParameter(_))));
        // rank-2 data asked for 3 endmembers
        let m = DMatrix::from_fn(6, 2, |i, j| 0.1 + (i + 3 * j) as f64 * 0.1);
        let a = DMatrix::from_fn(2, 10, |i, j| if i == 0 { j as f64 / 9.0 } else { 1.0 - j as f64 / 9.0 });
        let cube = HyperCube::from_matrix(m * a).unwrap();
        assert!(matches!(
            vca(&cube, 3, 0),
            Err(UnmixError::DegenerateSubspace { rank: 2, requested: 3 })
        ));
    }
}
