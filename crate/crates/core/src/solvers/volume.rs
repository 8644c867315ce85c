use nalgebra::DMatrix;

use super::multiplicative::{add_anchor_terms, anchor_value, frobenius_from_parts, ratio_update};
use super::{check_finite, SolverConfig, SolverState};
use crate::error::{Result, UnmixError};
use crate::linalg::{cofactor_matrix, factorial, inner, PcaProjection};
use crate::model::DENOM_GUARD;

/// `[1^T; P^T (M - mu 1^T)]` over the first `P.nrows()` rows of `M`.
fn volume_matrix(m: &DMatrix<f64>, pca: &PcaProjection) -> DMatrix<f64> {
    let l = pca.basis.nrows();
    let k = m.ncols();
    let mut centered = m.rows(0, l).into_owned();
    for mut col in centered.column_iter_mut() {
        col -= &pca.mean;
    }
    let projected = pca.basis.tr_mul(&centered);
    let mut z = DMatrix::from_element(k, k, 1.0);
    z.rows_mut(1, k - 1).copy_from(&projected.rows(0, k - 1));
    z
}

/// Volume `|det([1^T; Y])| / (K-1)!` of the simplex whose `K` vertices are
/// the columns of the `(K-1) x K` matrix `Y`.
pub fn simplex_volume(projected: &DMatrix<f64>) -> Result<f64> {
    let k = projected.ncols();
    if projected.nrows() + 1 != k {
        return Err(UnmixError::Shape(format!(
            "simplex vertices must be (K-1) x K, got {:?}",
            projected.shape()
        )));
    }
    let mut z = DMatrix::from_element(k, k, 1.0);
    z.rows_mut(1, k - 1).copy_from(projected);
    Ok(z.determinant().abs() / factorial(k - 1))
}

fn volume_term(m: &DMatrix<f64>, lambda: f64, pca: &PcaProjection) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let k = m.ncols();
    let det = volume_matrix(m, pca).determinant();
    lambda / (2.0 * factorial(k - 1)) * det * det
}

/// `f(M, A) = 1/2 ||X - MA||_F^2 + lambda / (2 (K-1)!) det^2(Z)`.
pub fn mvc_objective(m: &DMatrix<f64>, a: &DMatrix<f64>, x: &DMatrix<f64>, lambda: f64, pca: &PcaProjection) -> f64 {
    0.5 * (x - m * a).norm_squared() + volume_term(m, lambda, pca)
}

fn volume_gradient(m: &DMatrix<f64>, lambda: f64, pca: &PcaProjection) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(m.nrows(), m.ncols());
    if lambda == 0.0 {
        return g;
    }
    let k = m.ncols();
    let z = volume_matrix(m, pca);
    let det = z.determinant();
    let cof = cofactor_matrix(&z);
    let scale = lambda * det / factorial(k - 1);
    let l = pca.basis.nrows();
    let block = pca.basis.columns(0, k - 1) * cof.rows(1, k - 1) * scale;
    g.rows_mut(0, l).copy_from(&block);
    g
}

/// `grad_M f = (M A A^T - X A^T) + lambda det(Z) / (K-1)! * P C_{2:K,:}`
/// where `C` is the cofactor matrix of `Z`.
pub fn mvc_gradient_m(
    m: &DMatrix<f64>,
    a: &DMatrix<f64>,
    x: &DMatrix<f64>,
    lambda: f64,
    pca: &PcaProjection,
) -> DMatrix<f64> {
    m * (a * a.transpose()) - x * a.transpose() + volume_gradient(m, lambda, pca)
}

/// Projected Armijo search along `-grad`. `eval` returns the objective at a
/// trial point. Returns the accepted point and its objective, or `None`
/// when the point is stationary.
fn armijo<F>(
    current: &DMatrix<f64>,
    grad: &DMatrix<f64>,
    f0: f64,
    free_rows: usize,
    config: &SolverConfig,
    factor: &'static str,
    iteration: usize,
    mut eval: F,
) -> Result<Option<(DMatrix<f64>, f64)>>
where
    F: FnMut(&DMatrix<f64>) -> f64,
{
    let params = &config.armijo;
    let project = |s: f64| {
        let mut trial = current.clone();
        for j in 0..trial.ncols() {
            for i in 0..free_rows {
                trial[(i, j)] = (current[(i, j)] - s * grad[(i, j)]).max(0.0);
            }
        }
        trial
    };
    let first = project(params.initial_step);
    let first_move = (&first - current).norm();
    if first_move <= 1e-12 * current.norm().max(1.0) {
        return Ok(None);
    }
    let mut step = params.initial_step;
    for _ in 0..=params.max_shrinks {
        let trial = project(step);
        let decrease = inner(grad, &(&trial - current));
        let f = eval(&trial);
        if f.is_finite() && f <= f0 + params.sufficient_decrease * decrease {
            return Ok(Some((trial, f)));
        }
        step *= params.shrink;
    }
    Err(UnmixError::ArmijoStall {
        factor,
        iteration,
        shrinks: params.max_shrinks,
    })
}

/// Projected-gradient step on `M` then on `A`, each with its own Armijo
/// search on `f`.
pub fn mvcnmf_step(
    state: &mut SolverState,
    x: &DMatrix<f64>,
    config: &SolverConfig,
    pca: &PcaProjection,
) -> Result<()> {
    state.check_shapes(x)?;
    let k = state.m.ncols();
    if pca.dims() + 1 != k || pca.basis.nrows() > state.free_rows() {
        return Err(UnmixError::Shape(format!(
            "projection is {}x{} for {k} endmembers",
            pca.basis.nrows(),
            pca.dims()
        )));
    }
    let iteration = state.iter + 1;
    let lambda = config.lambda;
    let x_norm2 = state.x_norm2(x);

    let mut m = state.m.clone();
    if state.update_endmembers {
        let xat = x * state.a.transpose();
        let aat = &state.a * state.a.transpose();
        let fit = |m: &DMatrix<f64>| 0.5 * x_norm2 - inner(&xat, m) + 0.5 * inner(&(m.tr_mul(m)), &aat);
        let f0 = fit(&m) + volume_term(&m, lambda, pca) + anchor_value(&state.a, state);
        let grad = &m * &aat - &xat + volume_gradient(&m, lambda, pca);
        let anchor = anchor_value(&state.a, state);
        let accepted = armijo(&m, &grad, f0, state.free_rows(), config, "M", iteration, |t| {
            fit(t) + volume_term(t, lambda, pca) + anchor
        })?;
        if let Some((next, _)) = accepted {
            m = next;
        }
    }
    check_finite(&m, "M", iteration)?;

    let mtx = m.tr_mul(x);
    let mtm = m.tr_mul(&m);
    let vol = volume_term(&m, lambda, pca);
    let f_a = |a: &DMatrix<f64>| frobenius_from_parts(x_norm2, &mtx, &mtm, a) + vol + anchor_value(a, state);
    let f0 = f_a(&state.a);
    let mut grad = &mtm * &state.a - &mtx;
    if let Some(anchor) = &state.anchor {
        grad += (&state.a - &anchor.target) * (2.0 * anchor.weight);
    }
    let k_rows = state.a.nrows();
    let (a, objective) = match armijo(&state.a, &grad, f0, k_rows, config, "A", iteration, &f_a)? {
        Some(found) => found,
        None => (state.a.clone(), f0),
    };
    check_finite(&a, "A", iteration)?;

    state.m = m;
    state.a = a;
    state.iter = iteration;
    state.objective_history.push(objective);
    Ok(())
}

/// `D^T D v` for each column, `D` the first-difference operator.
fn diff_gram(m: &DMatrix<f64>) -> DMatrix<f64> {
    let l = m.nrows();
    let mut out = DMatrix::zeros(l, m.ncols());
    if l < 2 {
        return out;
    }
    for j in 0..m.ncols() {
        for i in 0..l - 1 {
            let d = m[(i + 1, j)] - m[(i, j)];
            out[(i, j)] -= d;
            out[(i + 1, j)] += d;
        }
    }
    out
}

/// `Phi(M) = sum_{i<j} ||grad m_i - grad m_j||^2` with the spectral first
/// difference as gradient.
pub fn edc_dissimilarity(m: &DMatrix<f64>) -> f64 {
    let (l, k) = m.shape();
    if l < 2 {
        return 0.0;
    }
    let diffs = DMatrix::from_fn(l - 1, k, |i, j| m[(i + 1, j)] - m[(i, j)]);
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            total += (diffs.column(i) - diffs.column(j)).norm_squared();
        }
    }
    total
}

/// `grad Phi = 2 D^T D M T`, `T = K I - 1 1^T`.
pub fn edc_gradient(m: &DMatrix<f64>) -> DMatrix<f64> {
    let k = m.ncols() as f64;
    let g = diff_gram(m);
    let total = g.column_sum();
    let mut out = g * (2.0 * k);
    for mut col in out.column_iter_mut() {
        col.axpy(-2.0, &total, 1.0);
    }
    out
}

/// Dissimilarity-regularised endmember rule
/// `M <- M o (X A^T - lambda/2 grad Phi) / (M A A^T)` with negatives set to
/// the floor, then the plain abundance rule.
pub fn edcnmf_step(state: &mut SolverState, x: &DMatrix<f64>, config: &SolverConfig) -> Result<()> {
    state.check_shapes(x)?;
    if x.nrows() < 2 {
        return Err(UnmixError::InvalidParameter(
            "dissimilarity needs at least two bands".into(),
        ));
    }
    let iteration = state.iter + 1;
    let free = state.free_rows();
    let mut m = state.m.clone();
    if state.update_endmembers {
        let xat = x * state.a.transpose();
        let maat = &state.m * (&state.a * state.a.transpose());
        let grad = edc_gradient(&state.m.rows(0, free).into_owned());
        for k in 0..m.ncols() {
            for l in 0..free {
                let num = xat[(l, k)] - 0.5 * config.lambda * grad[(l, k)];
                let v = m[(l, k)] * num / (maat[(l, k)] + DENOM_GUARD);
                m[(l, k)] = if v < 0.0 { config.edc_floor } else { v };
            }
        }
    }
    check_finite(&m, "M", iteration)?;

    let mtx = m.tr_mul(x);
    let mtm = m.tr_mul(&m);
    let mut num = mtx.clone();
    let mut den = &mtm * &state.a;
    add_anchor_terms(state, &mut num, &mut den);
    let a = ratio_update(&state.a, &num, &den);
    check_finite(&a, "A", iteration)?;

    let objective = frobenius_from_parts(state.x_norm2(x), &mtx, &mtm, &a)
        + 0.5 * config.lambda * edc_dissimilarity(&m.rows(0, free).into_owned())
        + anchor_value(&a, state);
    state.m = m;
    state.a = a;
    state.iter = iteration;
    state.objective_history.push(objective);
    Ok(())
}
