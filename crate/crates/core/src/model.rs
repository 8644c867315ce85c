//! Linear mixing model: data containers, reconstruction losses and the
//! simplex machinery shared by every solver.
//!
//! Matrices are dense and column-major with one column per pixel, so a pixel
//! spectrum is a contiguous slice of the cube.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, UnmixError};

/// Additive guard applied to every multiplicative-update denominator.
pub const DENOM_GUARD: f64 = 1e-12;

/// Multiplier applied to the mean data value to obtain the default
/// sum-to-one augmentation constant.
pub const ASC_DELTA_SCALE: f64 = 15.0;

/// Tolerance on column sums for matrices produced by sum-to-one operations.
pub const SIMPLEX_TOL: f64 = 1e-6;

fn check_finite(data: &DMatrix<f64>, what: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(UnmixError::InvalidData(format!("{what} contains non-finite entries")))
    }
}

fn check_nonnegative(data: &DMatrix<f64>, what: &str) -> Result<()> {
    match data.iter().position(|&v| v < 0.0) {
        None => Ok(()),
        Some(i) => Err(UnmixError::InvalidData(format!(
            "{what} has a negative entry at linear index {i}"
        ))),
    }
}

/// An `L x N` hyperspectral cube laid out on a `rows x cols` pixel grid.
///
/// Pixel `n` sits at grid position `(n / cols, n % cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    data: DMatrix<f64>,
    rows: usize,
    cols: usize,
    band_ids: Vec<usize>,
    wavelengths: Option<Vec<f64>>,
}

impl HyperCube {
    /// Builds a nonnegative cube. Band ids default to `1..=L`.
    pub fn new(data: DMatrix<f64>, rows: usize, cols: usize) -> Result<Self> {
        let bands = data.nrows();
        Self::with_bands(data, rows, cols, (1..=bands).collect(), None)
    }

    pub fn with_bands(
        data: DMatrix<f64>,
        rows: usize,
        cols: usize,
        band_ids: Vec<usize>,
        wavelengths: Option<Vec<f64>>,
    ) -> Result<Self> {
        let cube = Self::new_signed(data, rows, cols, band_ids, wavelengths)?;
        check_nonnegative(&cube.data, "cube")?;
        Ok(cube)
    }

    /// Builds a cube that may hold negative values, as produced by additive
    /// noise on low-reflectance bands. Solvers clamp such entries to zero.
    pub fn new_signed(
        data: DMatrix<f64>,
        rows: usize,
        cols: usize,
        band_ids: Vec<usize>,
        wavelengths: Option<Vec<f64>>,
    ) -> Result<Self> {
        if rows * cols != data.ncols() {
            return Err(UnmixError::Shape(format!(
                "grid {rows}x{cols} does not match {} pixels",
                data.ncols()
            )));
        }
        if band_ids.len() != data.nrows() {
            return Err(UnmixError::Shape(format!(
                "{} band ids for {} bands",
                band_ids.len(),
                data.nrows()
            )));
        }
        if let Some(w) = &wavelengths {
            if w.len() != data.nrows() {
                return Err(UnmixError::Shape(format!(
                    "{} wavelengths for {} bands",
                    w.len(),
                    data.nrows()
                )));
            }
        }
        check_finite(&data, "cube")?;
        Ok(Self {
            data,
            rows,
            cols,
            band_ids,
            wavelengths,
        })
    }

    /// A single-row cube, convenient when no spatial grid exists.
    pub fn from_matrix(data: DMatrix<f64>) -> Result<Self> {
        let n = data.ncols();
        Self::new(data, 1, n)
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_data(self) -> DMatrix<f64> {
        self.data
    }

    pub fn bands(&self) -> usize {
        self.data.nrows()
    }

    pub fn pixels(&self) -> usize {
        self.data.ncols()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn band_ids(&self) -> &[usize] {
        &self.band_ids
    }

    pub fn wavelengths(&self) -> Option<&[f64]> {
        self.wavelengths.as_deref()
    }

    pub fn pixel_index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn is_nonnegative(&self) -> bool {
        self.data.iter().all(|&v| v >= 0.0)
    }

    /// Copy of the data with negative entries set to zero.
    pub fn clamped_data(&self) -> DMatrix<f64> {
        self.data.map(|v| v.max(0.0))
    }
}

/// `L x K` matrix of endmember signatures, one per column.
#[derive(Debug, Clone, PartialEq)]
pub struct EndmemberMatrix {
    data: DMatrix<f64>,
    names: Vec<String>,
}

impl EndmemberMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        let names = (1..=data.ncols()).map(|k| format!("#{k}")).collect();
        Self::with_names(data, names)
    }

    pub fn with_names(data: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        if names.len() != data.ncols() {
            return Err(UnmixError::Shape(format!(
                "{} names for {} endmembers",
                names.len(),
                data.ncols()
            )));
        }
        if data.ncols() > data.nrows() {
            return Err(UnmixError::Shape(format!(
                "{} endmembers exceed {} bands",
                data.ncols(),
                data.nrows()
            )));
        }
        check_finite(&data, "endmember matrix")?;
        check_nonnegative(&data, "endmember matrix")?;
        Ok(Self { data, names })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn bands(&self) -> usize {
        self.data.nrows()
    }

    pub fn count(&self) -> usize {
        self.data.ncols()
    }

    pub fn into_data(self) -> DMatrix<f64> {
        self.data
    }

    /// Reorders the columns so that column `i` of the result is column
    /// `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let cols: Vec<_> = order.iter().map(|&j| self.data.column(j)).collect();
        let names = order.iter().map(|&j| self.names[j].clone()).collect();
        Self::with_names(DMatrix::from_columns(&cols), names)
    }
}

/// `K x N` matrix of abundances, one column per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct AbundanceMatrix {
    data: DMatrix<f64>,
}

impl AbundanceMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        check_finite(&data, "abundance matrix")?;
        check_nonnegative(&data, "abundance matrix")?;
        Ok(Self { data })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_data(self) -> DMatrix<f64> {
        self.data
    }

    pub fn count(&self) -> usize {
        self.data.nrows()
    }

    pub fn pixels(&self) -> usize {
        self.data.ncols()
    }

    /// Largest deviation of a column sum from one.
    pub fn max_simplex_violation(&self) -> f64 {
        self.data
            .column_iter()
            .map(|c| (c.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_on_simplex(&self, tol: f64) -> bool {
        self.max_simplex_violation() <= tol
    }

    /// Reorders the rows so that row `i` of the result is row `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let rows: Vec<_> = order.iter().map(|&k| self.data.row(k)).collect();
        Self::new(DMatrix::from_rows(&rows))
    }
}

/// Reconstruction loss between a cube and its approximation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// `0.5 * ||X - Xhat||_F^2`
    Frobenius,
    /// Sum over bands of the residual row norms.
    L21,
    /// Sum over bands of `-exp(-||r_l||^2 / sigma^2)`; lies in `[-L, 0]`.
    Correntropy { sigma: f64 },
}

/// `M * A`.
pub fn reconstruct(m: &EndmemberMatrix, a: &AbundanceMatrix) -> Result<DMatrix<f64>> {
    if m.count() != a.count() {
        return Err(UnmixError::Shape(format!(
            "endmember count {} differs from abundance rows {}",
            m.count(),
            a.count()
        )));
    }
    Ok(m.data() * a.data())
}

/// Squared Euclidean norm of every row of `r`.
pub fn row_sq_norms(r: &DMatrix<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(r.nrows());
    for col in r.column_iter() {
        for (o, v) in out.iter_mut().zip(col.iter()) {
            *o += v * v;
        }
    }
    out
}

pub fn loss(x: &DMatrix<f64>, xhat: &DMatrix<f64>, kind: LossKind) -> Result<f64> {
    if x.shape() != xhat.shape() {
        return Err(UnmixError::Shape(format!(
            "loss operands {:?} and {:?}",
            x.shape(),
            xhat.shape()
        )));
    }
    let residual = x - xhat;
    match kind {
        LossKind::Frobenius => Ok(0.5 * residual.norm_squared()),
        LossKind::L21 => Ok(row_sq_norms(&residual).iter().map(|v| v.sqrt()).sum()),
        LossKind::Correntropy { sigma } => {
            if sigma <= 0.0 || !sigma.is_finite() {
                return Err(UnmixError::InvalidParameter(format!(
                    "correntropy bandwidth must be positive, got {sigma}"
                )));
            }
            let s2 = sigma * sigma;
            Ok(row_sq_norms(&residual).iter().map(|v| -(-v / s2).exp()).sum())
        }
    }
}

/// Divides every column by its sum.
pub fn project_sum_to_one(a: &AbundanceMatrix) -> Result<AbundanceMatrix> {
    let mut data = a.data().clone();
    project_columns_in_place(&mut data)?;
    AbundanceMatrix::new(data)
}

pub(crate) fn project_columns_in_place(data: &mut DMatrix<f64>) -> Result<()> {
    for (j, mut col) in data.column_iter_mut().enumerate() {
        let s = col.sum();
        if s <= 0.0 {
            return Err(UnmixError::DegenerateColumn(j));
        }
        col /= s;
    }
    Ok(())
}

/// Appends a constant row `delta` to both `X` and `M`, so that a
/// nonnegative least-squares fit of the augmented system pulls each
/// abundance column towards unit sum.
pub fn augment_asc(x: &DMatrix<f64>, m: &DMatrix<f64>, delta: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(UnmixError::InvalidParameter(format!(
            "augmentation constant must be positive, got {delta}"
        )));
    }
    Ok((append_row(x, delta), append_row(m, delta)))
}

pub(crate) fn append_row(x: &DMatrix<f64>, value: f64) -> DMatrix<f64> {
    let (r, c) = x.shape();
    let mut out = x.clone().resize_vertically(r + 1, value);
    out.row_mut(r).fill(value);
    debug_assert_eq!(out.ncols(), c);
    out
}

/// `15 * mean(X)`, or 1 when the cube averages to zero.
pub fn default_asc_delta(x: &DMatrix<f64>) -> f64 {
    let mean = if x.is_empty() { 0.0 } else { x.mean() };
    if mean > 0.0 {
        ASC_DELTA_SCALE * mean
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn em(data: DMatrix<f64>) -> EndmemberMatrix {
        EndmemberMatrix::new(data).unwrap()
    }

    fn ab(data: DMatrix<f64>) -> AbundanceMatrix {
        AbundanceMatrix::new(data).unwrap()
    }

    #[test]
    fn identity_endmembers_reproduce_abundances() {
        let x = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let out = reconstruct(&em(DMatrix::identity(3, 3)), &ab(x.clone())).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn single_endmember_broadcasts() {
        let m = DMatrix::from_column_slice(3, 1, &[0.2, 0.5, 0.9]);
        let out = reconstruct(&em(m.clone()), &ab(DMatrix::from_element(1, 4, 1.0))).unwrap();
        for c in out.column_iter() {
            assert_eq!(c, m.column(0));
        }
    }

    #[test]
    fn product_matches_hand_multiplication() {
        // M (4x2), A (2x3) with 0/1 entries; expected computed entry by entry.
        let m = DMatrix::from_row_slice(4, 2, &[1., 0., 0., 1., 1., 1., 0., 0.]);
        let a = DMatrix::from_row_slice(2, 3, &[1., 0., 1., 1., 1., 0.]);
        let expected = DMatrix::from_row_slice(4, 3, &[1., 0., 1., 1., 1., 0., 2., 1., 1., 0., 0., 0.]);
        assert_eq!(reconstruct(&em(m), &ab(a)).unwrap(), expected);
    }

    #[test]
    fn reconstruct_rejects_inner_dimension_mismatch() {
        let err = reconstruct(&em(DMatrix::identity(3, 2)), &ab(DMatrix::zeros(3, 2)));
        assert!(matches!(err, Err(UnmixError::Shape(_))));
    }

    #[test]
    fn zero_residual_losses() {
        let x = DMatrix::from_fn(5, 7, |i, j| (i + j) as f64 * 0.1);
        assert_eq!(loss(&x, &x, LossKind::Frobenius).unwrap(), 0.0);
        assert_eq!(loss(&x, &x, LossKind::L21).unwrap(), 0.0);
        assert_eq!(loss(&x, &x, LossKind::Correntropy { sigma: 0.3 }).unwrap(), -5.0);
    }

    #[test]
    fn scalar_residual_losses() {
        let x = DMatrix::from_element(1, 1, 3.0);
        let y = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(loss(&x, &y, LossKind::Frobenius).unwrap(), 2.0);
        assert_eq!(loss(&x, &y, LossKind::L21).unwrap(), 2.0);
    }

    #[test]
    fn l21_row_norms() {
        let x = DMatrix::from_row_slice(2, 2, &[3., 4., 0., 0.]);
        assert_eq!(loss(&x, &DMatrix::zeros(2, 2), LossKind::L21).unwrap(), 5.0);
    }

    #[test]
    fn loss_errors() {
        let x = DMatrix::zeros(2, 2);
        assert!(loss(&x, &DMatrix::zeros(2, 3), LossKind::Frobenius).is_err());
        assert!(loss(&x, &x, LossKind::Correntropy { sigma: 0.0 }).is_err());
    }

    #[test]
    fn l21_grows_linearly_frobenius_quadratically() {
        let x = DMatrix::from_element(4, 6, 0.5);
        let mut prev: Option<(f64, f64)> = None;
        for mag in [2.0, 4.0, 8.0] {
            let mut y = x.clone();
            y.row_mut(1).add_scalar_mut(mag);
            let fro = loss(&x, &y, LossKind::Frobenius).unwrap();
            let l21 = loss(&x, &y, LossKind::L21).unwrap();
            assert!(fro > l21);
            if let Some((pf, pl)) = prev {
                assert!((l21 / pl - 2.0).abs() < 1e-12);
                assert!((fro / pf - 4.0).abs() < 1e-12);
            }
            prev = Some((fro, l21));
        }
    }

    #[test]
    fn sum_to_one_examples() {
        let a = ab(DMatrix::from_column_slice(2, 1, &[2.0, 2.0]));
        assert_eq!(project_sum_to_one(&a).unwrap().data().as_slice(), &[0.5, 0.5]);
        let a = ab(DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]));
        let p = project_sum_to_one(&a).unwrap();
        for (v, e) in p.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-15);
        }
        let a = ab(DMatrix::from_column_slice(2, 1, &[0.25, 0.75]));
        assert_eq!(project_sum_to_one(&a).unwrap(), a);
    }

    #[test]
    fn sum_to_one_rejects_zero_column() {
        let a = ab(DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        assert!(matches!(project_sum_to_one(&a), Err(UnmixError::DegenerateColumn(1))));
    }

    #[test]
    fn augmentation_appends_delta_row() {
        let (x, m) = augment_asc(&DMatrix::zeros(2, 2), &DMatrix::zeros(2, 3), 1.0).unwrap();
        assert_eq!(x.shape(), (3, 2));
        assert_eq!(m.shape(), (3, 3));
        assert_eq!(x.row(2).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0]);
        assert!(m.row(2).iter().all(|&v| v == 1.0));
        assert!(augment_asc(&DMatrix::zeros(2, 2), &DMatrix::zeros(2, 2), 0.0).is_err());
    }

    #[test]
    fn default_delta_scales_with_mean() {
        let x = DMatrix::from_element(3, 3, 0.2);
        assert!((default_asc_delta(&x) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn cube_validation() {
        assert!(HyperCube::new(DMatrix::zeros(3, 6), 2, 2).is_err());
        assert!(HyperCube::new(DMatrix::from_element(2, 2, -1.0), 1, 2).is_err());
        let c = HyperCube::new(DMatrix::zeros(3, 6), 2, 3).unwrap();
        assert_eq!(c.band_ids(), &[1, 2, 3]);
        assert_eq!(c.pixel_index(1, 2), 5);
        assert!(EndmemberMatrix::new(DMatrix::zeros(2, 3)).is_err());
    }

    proptest! {
        #[test]
        fn reconstruction_is_nonnegative(
            m in proptest::collection::vec(0.0f64..1.0, 12),
            a in proptest::collection::vec(0.0f64..1.0, 15),
        ) {
            let m = em(DMatrix::from_vec(4, 3, m));
            let a = ab(DMatrix::from_vec(3, 5, a));
            prop_assert!(reconstruct(&m, &a).unwrap().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn projection_idempotent_and_keeps_argmax(
            a in proptest::collection::vec(0.01f64..1.0, 12),
        ) {
            let a = ab(DMatrix::from_vec(3, 4, a));
            let once = project_sum_to_one(&a).unwrap();
            let twice = project_sum_to_one(&once).unwrap();
            for (x, y) in once.data().iter().zip(twice.data().iter()) {
                prop_assert!((x - y).abs() < 1e-15);
            }
            for j in 0..4 {
                prop_assert_eq!(a.data().column(j).imax(), once.data().column(j).imax());
            }
        }
    }
}
