use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{Result, UnmixError};
use crate::model::{AbundanceMatrix, EndmemberMatrix, HyperCube};

const MAX_ACTIVE_SET_ITERS: usize = 500;

/// Prepared per-endmember-set solver for
/// `min 0.5 a^T G a - b^T a  s.t. a >= 0, sum(a) = 1`
/// where `G = M^T M` and `b = M^T x`.
#[derive(Debug, Clone)]
pub struct SimplexLsq {
    gram: DMatrix<f64>,
    tol: f64,
}

impl SimplexLsq {
    pub fn new(gram: DMatrix<f64>) -> Self {
        let k = gram.nrows();
        let scale = gram.diagonal().iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1.0);
        let mut gram = gram;
        let (values, _) = crate::linalg::sorted_symmetric_eigen(gram.clone());
        if k > 0 && values[k - 1] <= 1e-12 * values[0].max(f64::MIN_POSITIVE) {
            let ridge = 1e-10 * gram.trace() / k as f64;
            warn!("endmember matrix is rank deficient; adding ridge {ridge:e} to the FCLS Gram matrix");
            for i in 0..k {
                gram[(i, i)] += ridge;
            }
        }
        Self {
            gram,
            tol: 1e-13 * scale,
        }
    }

    /// Primal active-set solve for one pixel; `b = M^T x`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let g = &self.gram;
        let k = g.nrows();
        let mut a = vec![0.0; k];
        let mut free = vec![false; k];
        // start from the best vertex of the simplex
        let start = (0..k)
            .min_by(|&i, &j| {
                let fi = 0.5 * g[(i, i)] - b[i];
                let fj = 0.5 * g[(j, j)] - b[j];
                fi.total_cmp(&fj)
            })
            .unwrap_or(0);
        a[start] = 1.0;
        free[start] = true;

        for _ in 0..MAX_ACTIVE_SET_ITERS {
            let idx: Vec<usize> = (0..k).filter(|&i| free[i]).collect();
            let (p, nu) = self.equality_solve(&idx, b);

            if p.iter().any(|&v| v < 0.0) {
                let mut t = 1.0;
                let mut block = None;
                for (pos, &i) in idx.iter().enumerate() {
                    if p[pos] < a[i] {
                        let ti = a[i] / (a[i] - p[pos]);
                        if ti < t {
                            t = ti;
                            block = Some(i);
                        }
                    }
                }
                for (pos, &i) in idx.iter().enumerate() {
                    a[i] += t * (p[pos] - a[i]);
                }
                if let Some(i) = block {
                    a[i] = 0.0;
                    free[i] = false;
                }
                continue;
            }

            for (pos, &i) in idx.iter().enumerate() {
                a[i] = p[pos];
            }
            // multipliers of the active bounds: mu_i = (G a - b)_i + nu
            let mut worst = None;
            let mut worst_val = -self.tol;
            for i in (0..k).filter(|&i| !free[i]) {
                let grad: f64 = (0..k).map(|j| g[(i, j)] * a[j]).sum::<f64>() - b[i];
                let mu = grad + nu;
                if mu < worst_val {
                    worst_val = mu;
                    worst = Some(i);
                }
            }
            match worst {
                Some(i) => free[i] = true,
                None => break,
            }
        }
        a
    }

    fn equality_solve(&self, idx: &[usize], b: &[f64]) -> (Vec<f64>, f64) {
        let f = idx.len();
        let mut kkt = DMatrix::zeros(f + 1, f + 1);
        let mut rhs = DVector::zeros(f + 1);
        for (r, &i) in idx.iter().enumerate() {
            for (c, &j) in idx.iter().enumerate() {
                kkt[(r, c)] = self.gram[(i, j)];
            }
            kkt[(r, f)] = 1.0;
            kkt[(f, r)] = 1.0;
            rhs[r] = b[i];
        }
        rhs[f] = 1.0;
        let sol = match kkt.clone().lu().solve(&rhs) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => {
                let mut reg = kkt;
                let ridge = 1e-10 * (1.0 + self.gram.trace());
                for r in 0..f {
                    reg[(r, r)] += ridge;
                }
                reg.lu().solve(&rhs).unwrap_or_else(|| {
                    let mut s = DVector::from_element(f + 1, 1.0 / f as f64);
                    s[f] = 0.0;
                    s
                })
            }
        };
        (sol.rows(0, f).iter().copied().collect(), sol[f])
    }
}

/// Per-column fully constrained least squares of `x` on `m`.
pub fn simplex_least_squares(x: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.nrows() != m.nrows() {
        return Err(UnmixError::Shape(format!(
            "cube has {} bands, endmembers have {}",
            x.nrows(),
            m.nrows()
        )));
    }
    let k = m.ncols();
    if k > m.nrows() + 1 {
        warn!("FCLS is underdetermined: {k} endmembers for {} bands", m.nrows());
    }
    let solver = SimplexLsq::new(m.tr_mul(m));
    let b = m.tr_mul(x);
    let mut out = DMatrix::zeros(k, x.ncols());
    for (j, col) in b.column_iter().enumerate() {
        let a = solver.solve(col.as_slice());
        out.column_mut(j).copy_from_slice(&a);
    }
    Ok(out)
}

/// Fully constrained least squares: each pixel's abundances minimise
/// `||x - M a||^2` over the probability simplex.
pub fn fcls(cube: &HyperCube, m: &EndmemberMatrix) -> Result<AbundanceMatrix> {
    AbundanceMatrix::new(simplex_least_squares(cube.data(), m.data())?)
}

/// Lawson-Hanson nonnegative least squares in Gram form:
/// `min 0.5 a^T G a - b^T a  s.t. a >= 0`.
pub fn nnls_gram(g: &DMatrix<f64>, b: &[f64], tol: f64) -> Vec<f64> {
    let k = g.nrows();
    let mut x = vec![0.0; k];
    let mut passive = vec![false; k];
    let grad_neg = |x: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|i| b[i] - (0..k).map(|j| g[(i, j)] * x[j]).sum::<f64>())
            .collect()
    };
    for _ in 0..(3 * k + 10) {
        let w = grad_neg(&x);
        let cand = (0..k).filter(|&i| !passive[i]).max_by(|&i, &j| w[i].total_cmp(&w[j]));
        match cand {
            Some(j) if w[j] > tol => passive[j] = true,
            _ => break,
        }
        for _ in 0..(3 * k + 10) {
            let idx: Vec<usize> = (0..k).filter(|&i| passive[i]).collect();
            let sub = DMatrix::from_fn(idx.len(), idx.len(), |r, c| g[(idx[r], idx[c])]);
            let rhs = DVector::from_iterator(idx.len(), idx.iter().map(|&i| b[i]));
            let s = sub
                .clone()
                .cholesky()
                .map(|c| c.solve(&rhs))
                .or_else(|| sub.lu().solve(&rhs))
                .unwrap_or_else(|| DVector::zeros(idx.len()));
            if s.iter().all(|&v| v > 0.0) {
                for (p, &i) in idx.iter().enumerate() {
                    x[i] = s[p];
                }
                break;
            }
            let mut alpha = 1.0f64;
            for (p, &i) in idx.iter().enumerate() {
                if s[p] <= 0.0 {
                    alpha = alpha.min(x[i] / (x[i] - s[p]));
                }
            }
            for (p, &i) in idx.iter().enumerate() {
                x[i] += alpha * (s[p] - x[i]);
                if x[i] <= tol {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
        }
    }
    x
}

/// FCLS approximated by nonnegative least squares on the sum-to-one
/// augmented system `[X; delta 1^T] ~ [M; delta 1^T] A`.
pub fn fcls_augmented(cube: &HyperCube, m: &EndmemberMatrix, delta: f64) -> Result<AbundanceMatrix> {
    let (xa, ma) = crate::model::augment_asc(cube.data(), m.data(), delta)?;
    let g = ma.tr_mul(&ma);
    let b = ma.tr_mul(&xa);
    let mut out = DMatrix::zeros(m.count(), cube.pixels());
    for (j, col) in b.column_iter().enumerate() {
        let a = nnls_gram(&g, col.as_slice(), 1e-10);
        out.column_mut(j).copy_from_slice(&a);
    }
    AbundanceMatrix::new(out)
}
