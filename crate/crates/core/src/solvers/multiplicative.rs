use nalgebra::{DMatrix, DVector};

use super::{check_finite, SolverConfig, SolverState, SolverVariant};
use crate::error::{Result, UnmixError};
use crate::graph::LaplacianPair;
use crate::linalg::inner;
use crate::model::DENOM_GUARD;

/// `M <- M o (X A^T) / (M A A^T)` on the free rows of `M`.
pub(crate) fn endmember_update(
    m: &DMatrix<f64>,
    a: &DMatrix<f64>,
    x: &DMatrix<f64>,
    fixed_rows: usize,
) -> DMatrix<f64> {
    let xat = x * a.transpose();
    let maat = m * (a * a.transpose());
    let free = m.nrows() - fixed_rows;
    let mut out = m.clone();
    for k in 0..m.ncols() {
        for l in 0..free {
            out[(l, k)] *= xat[(l, k)] / (maat[(l, k)] + DENOM_GUARD);
        }
    }
    out
}

/// `A o num / (den + guard)`.
pub(crate) fn ratio_update(a: &DMatrix<f64>, num: &DMatrix<f64>, den: &DMatrix<f64>) -> DMatrix<f64> {
    a.zip_zip_map(num, den, |v, p, q| v * p / (q + DENOM_GUARD))
}

/// `1/2 ||X - M A||_F^2` from `M^T X`, `M^T M` and `||X||^2`.
pub(crate) fn frobenius_from_parts(x_norm2: f64, mtx: &DMatrix<f64>, mtm: &DMatrix<f64>, a: &DMatrix<f64>) -> f64 {
    let cross = inner(mtx, a);
    let quad = inner(mtm, &(a * a.transpose()));
    (0.5 * (x_norm2 - 2.0 * cross + quad)).max(0.0)
}

pub(crate) fn require_graph(
    variant: SolverVariant,
    graph: Option<&LaplacianPair>,
    n: usize,
) -> Result<Option<&LaplacianPair>> {
    if variant.graph_mode().is_none() {
        return Ok(None);
    }
    let g = graph.ok_or(UnmixError::MissingGraph(variant.tag()))?;
    if g.nodes() != n {
        return Err(UnmixError::Shape(format!(
            "graph has {} nodes for {n} pixels",
            g.nodes()
        )));
    }
    Ok(Some(g))
}

fn sqrt_sum(a: &DMatrix<f64>, xi: f64) -> f64 {
    a.iter().map(|v| (v + xi).sqrt()).sum()
}

/// Abundance-side penalty of `variant` (the objective minus the
/// reconstruction term).
pub fn abundance_penalty(
    variant: SolverVariant,
    a: &DMatrix<f64>,
    h: &DVector<f64>,
    config: &SolverConfig,
    graph: Option<&LaplacianPair>,
) -> Result<f64> {
    let lambda = config.lambda;
    let xi = config.xi;
    let graph_term = || -> Result<f64> {
        let g = require_graph(variant, graph, a.ncols())?.expect("graph variant");
        Ok(0.5 * lambda * g.trace_form(a))
    };
    Ok(match variant {
        SolverVariant::Nmf => 0.0,
        SolverVariant::L1 => lambda * a.sum(),
        SolverVariant::L12 => lambda * sqrt_sum(a, xi),
        SolverVariant::Gnmf => graph_term()?,
        SolverVariant::Dgs | SolverVariant::Rrlbs => {
            let mut total = 0.0;
            for (col, &hn) in a.column_iter().zip(h.iter()) {
                total += col.iter().map(|v| (v + xi).powf(1.0 - hn)).sum::<f64>();
            }
            lambda * total
        }
        SolverVariant::Ssnmf => graph_term()? + config.alpha * a.sum(),
        SolverVariant::Glnmf => graph_term()? + config.alpha * sqrt_sum(a, xi),
        other => {
            return Err(UnmixError::InvalidParameter(format!(
                "{other} has no abundance penalty of this form"
            )))
        }
    })
}

/// Adds the penalty's contributions to the numerator and denominator of
/// the abundance ratio, evaluated at the current `A`.
pub(crate) fn add_penalty_terms(
    variant: SolverVariant,
    a: &DMatrix<f64>,
    h: &DVector<f64>,
    config: &SolverConfig,
    graph: Option<&LaplacianPair>,
    num: &mut DMatrix<f64>,
    den: &mut DMatrix<f64>,
) {
    let lambda = config.lambda;
    let xi = config.xi;
    let half_power = |den: &mut DMatrix<f64>, weight: f64| {
        let c = weight * 0.5;
        den.zip_apply(a, |d, v| *d += c * (v + xi).powf(-0.5));
    };
    let graph_terms = |num: &mut DMatrix<f64>, den: &mut DMatrix<f64>| {
        if let Some(g) = graph {
            add_scaled(num, lambda, &g.right_multiply_w(a));
            add_scaled(den, lambda, &g.right_multiply_d(a));
        }
    };
    match variant {
        SolverVariant::Nmf => {}
        SolverVariant::L1 => den.add_scalar_mut(lambda),
        SolverVariant::L12 => half_power(den, lambda),
        SolverVariant::Gnmf => graph_terms(num, den),
        SolverVariant::Dgs | SolverVariant::Rrlbs => {
            for (n, &hn) in h.iter().enumerate() {
                let c = lambda * (1.0 - hn);
                let mut col = den.column_mut(n);
                for (d, v) in col.iter_mut().zip(a.column(n).iter()) {
                    *d += c * (v + xi).powf(-hn);
                }
            }
        }
        SolverVariant::Ssnmf => {
            graph_terms(num, den);
            den.add_scalar_mut(config.alpha);
        }
        SolverVariant::Glnmf => {
            graph_terms(num, den);
            half_power(den, config.alpha);
        }
        _ => {}
    }
}

fn add_scaled(dst: &mut DMatrix<f64>, c: f64, src: &DMatrix<f64>) {
    dst.zip_apply(src, |d, s| *d += c * s);
}

pub(crate) fn add_anchor_terms(state: &SolverState, num: &mut DMatrix<f64>, den: &mut DMatrix<f64>) {
    if let Some(anchor) = &state.anchor {
        add_scaled(num, 2.0 * anchor.weight, &anchor.target);
        add_scaled(den, 2.0 * anchor.weight, &state.a);
    }
}

pub(crate) fn anchor_value(state_a: &DMatrix<f64>, state: &SolverState) -> f64 {
    state
        .anchor
        .as_ref()
        .map(|an| an.weight * (state_a - &an.target).norm_squared())
        .unwrap_or(0.0)
}

/// One multiplicative step: the endmember rule followed by the variant's
/// abundance rule on the updated endmembers.
pub fn multiplicative_step(
    state: &mut SolverState,
    x: &DMatrix<f64>,
    variant: SolverVariant,
    config: &SolverConfig,
    graph: Option<&LaplacianPair>,
) -> Result<()> {
    if !variant.is_multiplicative() {
        return Err(UnmixError::InvalidParameter(format!(
            "{variant} is not a multiplicative variant"
        )));
    }
    state.check_shapes(x)?;
    let graph = require_graph(variant, graph, x.ncols())?;
    let iteration = state.iter + 1;

    let m = if state.update_endmembers {
        endmember_update(&state.m, &state.a, x, state.fixed_rows)
    } else {
        state.m.clone()
    };
    check_finite(&m, "M", iteration)?;

    let mtx = m.tr_mul(x);
    let mtm = m.tr_mul(&m);
    let mut num = mtx.clone();
    let mut den = &mtm * &state.a;
    add_penalty_terms(variant, &state.a, &state.h, config, graph, &mut num, &mut den);
    add_anchor_terms(state, &mut num, &mut den);
    let a = ratio_update(&state.a, &num, &den);
    check_finite(&a, "A", iteration)?;

    let objective = frobenius_from_parts(state.x_norm2(x), &mtx, &mtm, &a)
        + abundance_penalty(variant, &a, &state.h, config, graph)?
        + anchor_value(&a, state);

    state.m = m;
    state.a = a;
    state.iter = iteration;
    state.objective_history.push(objective);
    Ok(())
}
