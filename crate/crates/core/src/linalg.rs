//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Eigenpairs of a symmetric matrix sorted by decreasing eigenvalue.
pub(crate) fn sorted_symmetric_eigen(sym: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_columns(
        &order
            .iter()
            .map(|&i| eig.eigenvectors.column(i).into_owned())
            .collect::<Vec<_>>(),
    );
    (values, vectors)
}

/// Column mean of `x`.
pub(crate) fn column_mean(x: &DMatrix<f64>) -> DVector<f64> {
    let mut mu = DVector::zeros(x.nrows());
    for c in x.column_iter() {
        mu += c;
    }
    if x.ncols() > 0 {
        mu /= x.ncols() as f64;
    }
    mu
}

/// `x - mu 1^T`.
pub(crate) fn centered(x: &DMatrix<f64>, mu: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut c in out.column_iter_mut() {
        c -= mu;
    }
    out
}

/// Principal-component projection: leading directions `basis` (`L x d`)
/// and the data mean.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub basis: DMatrix<f64>,
    pub mean: DVector<f64>,
}

impl PcaProjection {
    /// Leading `d` principal components of the columns of `x`.
    pub fn fit(x: &DMatrix<f64>, d: usize) -> Self {
        let mean = column_mean(x);
        let xc = centered(x, &mean);
        let cov = &xc * xc.transpose() / (x.ncols().max(1) as f64);
        let (_, vectors) = sorted_symmetric_eigen(cov);
        let basis = vectors.columns(0, d.min(vectors.ncols())).into_owned();
        Self { basis, mean }
    }

    pub fn dims(&self) -> usize {
        self.basis.ncols()
    }
}

/// Determinant of the matrix with row `skip_r` and column `skip_c` removed.
fn minor(z: &DMatrix<f64>, skip_r: usize, skip_c: usize) -> f64 {
    let n = z.nrows();
    if n == 1 {
        return 1.0;
    }
    let sub = DMatrix::from_fn(n - 1, n - 1, |i, j| {
        let r = if i < skip_r { i } else { i + 1 };
        let c = if j < skip_c { j } else { j + 1 };
        z[(r, c)]
    });
    sub.determinant()
}

/// Cofactor matrix `C` with `d det(Z) / dZ = C`. Computed from minors so it
/// stays well defined for singular `Z`.
pub(crate) fn cofactor_matrix(z: &DMatrix<f64>) -> DMatrix<f64> {
    let n = z.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
        sign * minor(z, i, j)
    })
}

pub(crate) fn factorial(n: usize) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

/// Frobenius inner product.
pub(crate) fn inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}
