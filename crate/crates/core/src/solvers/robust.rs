use nalgebra::{DMatrix, DVector};

use super::multiplicative::{add_anchor_terms, add_penalty_terms, anchor_value, ratio_update};
use super::{check_finite, SolverConfig, SolverState, SolverVariant};
use crate::error::{Result, UnmixError};
use crate::model::{row_sq_norms, DENOM_GUARD};

/// Abundance penalty paired with a channel-weighted loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightedSparsity {
    /// `lambda * ||A||_1`.
    L1,
    /// `lambda * sum (A + xi)^(1 - h_n)` with the state's DgMap.
    DgMap,
}

/// Gini index of a nonnegative vector: 0 for a uniform vector, `(K-1)/K`
/// for a one-hot vector.
pub fn gini_sparsity(a: &[f64]) -> Result<f64> {
    if a.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(UnmixError::InvalidData(
            "Gini index needs a finite nonnegative vector".into(),
        ));
    }
    let l1: f64 = a.iter().sum();
    if l1 <= 0.0 {
        return Err(UnmixError::InvalidData("Gini index of the zero vector".into()));
    }
    let mut sorted = a.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = sorted.len() as f64;
    let acc: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, v)| (v / l1) * ((k - (i + 1) as f64 + 0.5) / k))
        .sum();
    Ok(1.0 - 2.0 * acc)
}

/// Gini index of every column; zero columns get 0.
pub(crate) fn dgmap_of(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(
        a.ncols(),
        a.column_iter().map(|c| gini_sparsity(c.as_slice()).unwrap_or(0.0)),
    )
}

/// Squared residual row norms `||x^l - (MA)^l||^2` from `X A^T` and
/// `M A A^T`, avoiding the full residual.
fn residual_rows(x_rows: &DVector<f64>, m: &DMatrix<f64>, xat: &DMatrix<f64>, maat: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.nrows(), |l, _| {
        let mut r = x_rows[l];
        for k in 0..m.ncols() {
            r += m[(l, k)] * (maat[(l, k)] - 2.0 * xat[(l, k)]);
        }
        r.max(0.0)
    })
}

/// `U_ll = exp(-r_l^2 / sigma^2)`.
pub fn correntropy_weights(residual_sq: &DVector<f64>, sigma: f64) -> DVector<f64> {
    let s2 = sigma * sigma;
    residual_sq.map(|r| (-r / s2).exp())
}

/// `U_ll = 1 / (2 sqrt(r_l^2 + eps))`.
pub fn l21_weights(residual_sq: &DVector<f64>, epsilon: f64) -> DVector<f64> {
    residual_sq.map(|r| 1.0 / (2.0 * (r + epsilon).sqrt()))
}

struct Products {
    x_rows: DVector<f64>,
    xat: DMatrix<f64>,
    maat: DMatrix<f64>,
}

fn products(state: &SolverState, x: &DMatrix<f64>) -> Products {
    let xat = x * state.a.transpose();
    let maat = &state.m * (&state.a * state.a.transpose());
    Products {
        x_rows: row_sq_norms(x),
        xat,
        maat,
    }
}

fn weighted_update(
    state: &SolverState,
    x: &DMatrix<f64>,
    p: &Products,
    weights: &DVector<f64>,
    config: &SolverConfig,
    sparsity: WeightedSparsity,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let iteration = state.iter + 1;
    let mut m = state.m.clone();
    if state.update_endmembers {
        for k in 0..m.ncols() {
            for l in 0..state.free_rows() {
                let u = weights[l];
                m[(l, k)] *= u * p.xat[(l, k)] / (u * p.maat[(l, k)] + DENOM_GUARD);
            }
        }
    }
    check_finite(&m, "M", iteration)?;

    let mut um = m.clone();
    for (l, mut row) in um.row_iter_mut().enumerate() {
        row *= weights[l];
    }
    let mut num = um.tr_mul(x);
    let mut den = (um.tr_mul(&m)) * &state.a;
    let variant = match sparsity {
        WeightedSparsity::L1 => SolverVariant::L1,
        WeightedSparsity::DgMap => SolverVariant::Dgs,
    };
    add_penalty_terms(variant, &state.a, &state.h, config, None, &mut num, &mut den);
    add_anchor_terms(state, &mut num, &mut den);
    let a = ratio_update(&state.a, &num, &den);
    check_finite(&a, "A", iteration)?;
    Ok((m, a))
}

/// One step of the channel-weighted rule
/// `M <- M o (U X A^T) / (U M A A^T)`,
/// `A <- A o (M^T U X) / (M^T U M A + penalty)` with `U = diag(weights)`
/// held fixed. The recorded objective is the weighted least-squares one,
/// `1/2 ||U^(1/2) (X - MA)||^2 + penalty`.
pub fn weighted_step(
    state: &mut SolverState,
    x: &DMatrix<f64>,
    weights: &DVector<f64>,
    config: &SolverConfig,
    sparsity: WeightedSparsity,
) -> Result<()> {
    state.check_shapes(x)?;
    if weights.len() != x.nrows() || weights.iter().any(|w| !(*w > 0.0)) {
        return Err(UnmixError::InvalidParameter(
            "channel weights must be positive, one per band".into(),
        ));
    }
    let p = products(state, x);
    let (m, a) = weighted_update(state, x, &p, weights, config, sparsity)?;
    let r = row_sq_norms(&(x - &m * &a));
    let fit = 0.5 * r.dot(weights);
    let penalty = penalty_value(&a, &state.h, config, sparsity)?;
    let objective = fit + penalty + anchor_value(&a, state);
    commit(state, m, a, weights.clone(), objective);
    Ok(())
}

fn penalty_value(a: &DMatrix<f64>, h: &DVector<f64>, config: &SolverConfig, sparsity: WeightedSparsity) -> Result<f64> {
    let variant = match sparsity {
        WeightedSparsity::L1 => SolverVariant::L1,
        WeightedSparsity::DgMap => SolverVariant::Dgs,
    };
    super::abundance_penalty(variant, a, h, config, None)
}

fn commit(state: &mut SolverState, m: DMatrix<f64>, a: DMatrix<f64>, u: DVector<f64>, objective: f64) {
    state.m = m;
    state.a = a;
    state.u = u;
    state.iter += 1;
    state.objective_history.push(objective);
}

/// Correntropy step: recompute `U` from the current residual rows, then
/// apply the weighted rule with an l1 penalty. Records
/// `sum_l -exp(-r_l^2 / sigma^2) + 2 lambda ||A||_1`.
pub fn cenmf_step(state: &mut SolverState, x: &DMatrix<f64>, config: &SolverConfig, sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(UnmixError::InvalidParameter(format!(
            "correntropy bandwidth must be positive, got {sigma}"
        )));
    }
    state.check_shapes(x)?;
    let p = products(state, x);
    let u = correntropy_weights(&residual_rows(&p.x_rows, &state.m, &p.xat, &p.maat), sigma);
    let (m, a) = weighted_update(state, x, &p, &u, config, WeightedSparsity::L1)?;
    let s2 = sigma * sigma;
    let fit: f64 = row_sq_norms(&(x - &m * &a)).iter().map(|r| -(-r / s2).exp()).sum();
    let objective = fit + 2.0 * config.lambda * a.sum() + anchor_value(&a, state);
    commit(state, m, a, u, objective);
    Ok(())
}

/// l2,1-loss step with the DgMap penalty. `U` comes from the current
/// residual rows; `h` is refreshed to the column Gini indices every
/// `refresh_period` iterations. Records `1/2 sum_l sqrt(r_l^2 + eps) +
/// lambda * Psi(A)`.
pub fn rrlbs_step(state: &mut SolverState, x: &DMatrix<f64>, config: &SolverConfig) -> Result<()> {
    state.check_shapes(x)?;
    let p = products(state, x);
    let u = l21_weights(&residual_rows(&p.x_rows, &state.m, &p.xat, &p.maat), config.epsilon);
    let (m, a) = weighted_update(state, x, &p, &u, config, WeightedSparsity::DgMap)?;
    if (state.iter + 1).is_multiple_of(config.refresh_period) {
        state.h = dgmap_of(&a);
    }
    let fit: f64 = row_sq_norms(&(x - &m * &a))
        .iter()
        .map(|r| (r + config.epsilon).sqrt())
        .sum();
    let objective = 0.5 * fit + penalty_value(&a, &state.h, config, WeightedSparsity::DgMap)? + anchor_value(&a, state);
    commit(state, m, a, u, objective);
    Ok(())
}
