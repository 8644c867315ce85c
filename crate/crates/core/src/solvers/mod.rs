//! The NMF-family unmixing solvers behind one iteration interface: each step
//! takes the current state and returns the next one, appending the variant's
//! objective to the history.

mod multiplicative;
mod robust;
mod volume;

use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UnmixError};
use crate::graph::{GraphMode, LaplacianPair};
use crate::linalg::PcaProjection;
use crate::model::{append_row, default_asc_delta, row_sq_norms, AbundanceMatrix, EndmemberMatrix, HyperCube};

pub use multiplicative::{abundance_penalty, multiplicative_step};
pub use robust::{
    cenmf_step, correntropy_weights, gini_sparsity, l21_weights, rrlbs_step, weighted_step, WeightedSparsity,
};
pub use volume::{
    edc_dissimilarity, edc_gradient, edcnmf_step, mvc_gradient_m, mvc_objective, mvcnmf_step, simplex_volume,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverVariant {
    Nmf,
    L1,
    L12,
    Gnmf,
    Dgs,
    Rrlbs,
    Ssnmf,
    Glnmf,
    Cenmf,
    Mvcnmf,
    Edcnmf,
}

impl SolverVariant {
    pub const ALL: [SolverVariant; 11] = [
        SolverVariant::Nmf,
        SolverVariant::L1,
        SolverVariant::L12,
        SolverVariant::Gnmf,
        SolverVariant::Dgs,
        SolverVariant::Rrlbs,
        SolverVariant::Ssnmf,
        SolverVariant::Glnmf,
        SolverVariant::Cenmf,
        SolverVariant::Mvcnmf,
        SolverVariant::Edcnmf,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            SolverVariant::Nmf => "nmf",
            SolverVariant::L1 => "l1",
            SolverVariant::L12 => "l12",
            SolverVariant::Gnmf => "gnmf",
            SolverVariant::Dgs => "dgs",
            SolverVariant::Rrlbs => "rrlbs",
            SolverVariant::Ssnmf => "ssnmf",
            SolverVariant::Glnmf => "glnmf",
            SolverVariant::Cenmf => "cenmf",
            SolverVariant::Mvcnmf => "mvcnmf",
            SolverVariant::Edcnmf => "edcnmf",
        }
    }

    /// Variants whose abundance update is a plain multiplicative ratio under
    /// the Frobenius loss.
    pub fn is_multiplicative(self) -> bool {
        matches!(
            self,
            SolverVariant::Nmf
                | SolverVariant::L1
                | SolverVariant::L12
                | SolverVariant::Gnmf
                | SolverVariant::Dgs
                | SolverVariant::Ssnmf
                | SolverVariant::Glnmf
        )
    }

    /// Graph the variant regularises with, if any.
    pub fn graph_mode(self) -> Option<GraphMode> {
        match self {
            SolverVariant::Gnmf | SolverVariant::Glnmf => Some(GraphMode::Spectral),
            SolverVariant::Ssnmf => Some(GraphMode::SpectralSpatial),
            _ => None,
        }
    }

    pub fn uses_lambda(self) -> bool {
        self != SolverVariant::Nmf
    }

    pub fn uses_alpha(self) -> bool {
        matches!(self, SolverVariant::Ssnmf | SolverVariant::Glnmf)
    }
}

impl fmt::Display for SolverVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for SolverVariant {
    type Err = UnmixError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        SolverVariant::ALL
            .into_iter()
            .find(|v| v.tag() == lower)
            .ok_or_else(|| UnmixError::Parse(format!("unknown solver variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArmijoParams {
    pub initial_step: f64,
    pub shrink: f64,
    pub sufficient_decrease: f64,
    pub max_shrinks: usize,
}

impl Default for ArmijoParams {
    fn default() -> Self {
        Self {
            initial_step: 1.0,
            shrink: 0.5,
            sufficient_decrease: 1e-4,
            max_shrinks: 50,
        }
    }
}

/// Hyperparameters and iteration budget shared by all variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Weight of the abundance constraint (or of the endmember constraint
    /// for `mvcnmf` and `edcnmf`).
    pub lambda: f64,
    /// Secondary sparsity weight of `ssnmf` and `glnmf`.
    pub alpha: f64,
    /// Conditioning offset inside fractional powers of `A`.
    pub xi: f64,
    /// Correntropy bandwidth; `None` derives it from the initial residual.
    pub sigma: Option<f64>,
    /// Guard inside the l2,1 reweighting square root.
    pub epsilon: f64,
    pub max_iters: usize,
    /// Stop once `|f_t - f_{t-1}| / |f_{t-1}|` drops below this.
    pub rel_tol: f64,
    pub armijo: ArmijoParams,
    pub seed: u64,
    /// Impose sum-to-one through the augmented row.
    pub sum_to_one: bool,
    /// Augmentation constant; `None` means `15 * mean(X)`.
    pub asc_delta: Option<f64>,
    /// Iterations between DgMap refreshes in `rrlbs`.
    pub refresh_period: usize,
    /// Value negative endmember entries are clamped to in `edcnmf`.
    pub edc_floor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            alpha: 0.0,
            xi: 1e-8,
            sigma: None,
            epsilon: 1e-8,
            max_iters: 500,
            rel_tol: 1e-6,
            armijo: ArmijoParams::default(),
            seed: 0,
            sum_to_one: true,
            asc_delta: None,
            refresh_period: 30,
            edc_floor: 1e-9,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(UnmixError::InvalidParameter(format!("{what} out of range: {v}")));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", self.lambda);
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha", self.alpha);
        }
        if !(self.xi > 0.0) {
            return bad("xi", self.xi);
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon", self.epsilon);
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return bad("sigma", s);
            }
        }
        if let Some(d) = self.asc_delta {
            if !(d > 0.0 && d.is_finite()) {
                return bad("asc_delta", d);
            }
        }
        if !(self.rel_tol >= 0.0) {
            return bad("rel_tol", self.rel_tol);
        }
        let a = &self.armijo;
        if !(a.shrink > 0.0 && a.shrink < 1.0) {
            return bad("armijo.shrink", a.shrink);
        }
        if !(a.sufficient_decrease > 0.0 && a.sufficient_decrease < 1.0) {
            return bad("armijo.sufficient_decrease", a.sufficient_decrease);
        }
        if !(a.initial_step > 0.0) {
            return bad("armijo.initial_step", a.initial_step);
        }
        if self.refresh_period == 0 {
            return Err(UnmixError::InvalidParameter("refresh_period must be positive".into()));
        }
        if !(self.edc_floor >= 0.0) {
            return bad("edc_floor", self.edc_floor);
        }
        Ok(())
    }
}

/// Quadratic pull of the abundances towards a target,
/// `weight * ||A - target||_F^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub target: DMatrix<f64>,
    pub weight: f64,
}

/// Iterate of a solve.
///
/// `h` holds the DgMap; the matrix `H = 1_K h^T` is never formed. `u` holds
/// the diagonal of the channel weights used by the robust variants.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub m: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub h: DVector<f64>,
    pub u: DVector<f64>,
    pub iter: usize,
    pub objective_history: Vec<f64>,
    /// Trailing rows of `m` held fixed (the sum-to-one row).
    pub fixed_rows: usize,
    pub update_endmembers: bool,
    pub anchor: Option<Anchor>,
    /// `||X||_F^2` of the data the state is stepped against, set by
    /// [`solve_with`].
    pub(crate) x_norm2: Option<f64>,
}

impl SolverState {
    pub fn new(m: DMatrix<f64>, a: DMatrix<f64>) -> Self {
        let (l, n) = (m.nrows(), a.ncols());
        Self {
            m,
            a,
            h: DVector::zeros(n),
            u: DVector::from_element(l, 1.0),
            iter: 0,
            objective_history: Vec::new(),
            fixed_rows: 0,
            update_endmembers: true,
            anchor: None,
            x_norm2: None,
        }
    }

    pub(crate) fn x_norm2(&self, x: &DMatrix<f64>) -> f64 {
        self.x_norm2.unwrap_or_else(|| x.norm_squared())
    }

    pub fn with_dgmap(mut self, h: DVector<f64>) -> Self {
        self.h = h;
        self
    }

    pub(crate) fn free_rows(&self) -> usize {
        self.m.nrows() - self.fixed_rows
    }

    pub(crate) fn check_shapes(&self, x: &DMatrix<f64>) -> Result<()> {
        let (l, n) = x.shape();
        let k = self.m.ncols();
        if self.m.nrows() != l || self.a.shape() != (k, n) || self.h.len() != n || self.u.len() != l {
            return Err(UnmixError::Shape(format!(
                "state M {:?}, A {:?}, h {}, u {} against data {:?}",
                self.m.shape(),
                self.a.shape(),
                self.h.len(),
                self.u.len(),
                x.shape()
            )));
        }
        if let Some(anchor) = &self.anchor {
            if anchor.target.shape() != (k, n) {
                return Err(UnmixError::Shape("anchor target shape".into()));
            }
        }
        Ok(())
    }
}

/// Options beyond the basic `(X, init, graph)` triple.
#[derive(Debug, Clone, Default)]
pub struct SolveOptions<'a> {
    pub graph: Option<&'a LaplacianPair>,
    /// Fixed DgMap for `dgs`; defaults to the Gini sparsity of the initial
    /// abundance columns.
    pub dgmap: Option<DVector<f64>>,
    pub anchor: Option<Anchor>,
    /// Freeze the endmembers and update only the abundances.
    pub freeze_endmembers: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub final_objective: f64,
    pub asc_delta: Option<f64>,
    pub sigma: Option<f64>,
    /// Negative cube entries were set to zero before factorising.
    pub clamped_input: bool,
}

#[derive(Debug, Clone)]
pub struct SolveOutput {
    pub endmembers: EndmemberMatrix,
    pub abundances: AbundanceMatrix,
    pub objective_history: Vec<f64>,
    pub diagnostics: Diagnostics,
}

pub(crate) fn check_finite(m: &DMatrix<f64>, factor: &'static str, iteration: usize) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(UnmixError::Divergence { factor, iteration })
    }
}

/// Runs one step of `variant` on `state`.
pub fn step(
    state: &mut SolverState,
    x: &DMatrix<f64>,
    variant: SolverVariant,
    config: &SolverConfig,
    graph: Option<&LaplacianPair>,
    pca: Option<&PcaProjection>,
    sigma: f64,
) -> Result<()> {
    match variant {
        SolverVariant::Cenmf => cenmf_step(state, x, config, sigma),
        SolverVariant::Rrlbs => rrlbs_step(state, x, config),
        SolverVariant::Mvcnmf => {
            let pca = pca
                .ok_or_else(|| UnmixError::InvalidParameter("mvcnmf needs a principal-component projection".into()))?;
            mvcnmf_step(state, x, config, pca)
        }
        SolverVariant::Edcnmf => edcnmf_step(state, x, config),
        _ => multiplicative_step(state, x, variant, config, graph),
    }
}

/// Current objective of `variant` at `state`.
pub fn objective(
    state: &SolverState,
    x: &DMatrix<f64>,
    variant: SolverVariant,
    config: &SolverConfig,
    graph: Option<&LaplacianPair>,
    pca: Option<&PcaProjection>,
    sigma: f64,
) -> Result<f64> {
    let residual = x - &state.m * &state.a;
    let anchor = multiplicative::anchor_value(&state.a, state);
    let value = match variant {
        SolverVariant::Cenmf => {
            let s2 = sigma * sigma;
            row_sq_norms(&residual).iter().map(|r| -(-r / s2).exp()).sum::<f64>() + 2.0 * config.lambda * state.a.sum()
        }
        SolverVariant::Rrlbs => {
            0.5 * row_sq_norms(&residual)
                .iter()
                .map(|r| (r + config.epsilon).sqrt())
                .sum::<f64>()
                + abundance_penalty(SolverVariant::Dgs, &state.a, &state.h, config, None)?
        }
        SolverVariant::Mvcnmf => {
            let pca = pca
                .ok_or_else(|| UnmixError::InvalidParameter("mvcnmf needs a principal-component projection".into()))?;
            mvc_objective(&state.m, &state.a, x, config.lambda, pca)
        }
        SolverVariant::Edcnmf => {
            0.5 * residual.norm_squared()
                + 0.5 * config.lambda * edc_dissimilarity(&state.m.rows(0, state.free_rows()).into_owned())
        }
        v => 0.5 * residual.norm_squared() + abundance_penalty(v, &state.a, &state.h, config, graph)?,
    };
    Ok(value + anchor)
}

/// Default correntropy bandwidth: root-mean residual row norm.
pub fn default_sigma(x: &DMatrix<f64>, m: &DMatrix<f64>, a: &DMatrix<f64>) -> f64 {
    let r = row_sq_norms(&(x - m * a));
    let s = (r.sum() / r.len().max(1) as f64).sqrt();
    if s > 0.0 && s.is_finite() {
        s
    } else {
        1.0
    }
}

/// Runs `variant` from `init` until the relative objective change drops
/// below `rel_tol` or `max_iters` is reached.
pub fn solve(
    cube: &HyperCube,
    variant: SolverVariant,
    config: &SolverConfig,
    init: (&EndmemberMatrix, &AbundanceMatrix),
    graph: Option<&LaplacianPair>,
) -> Result<SolveOutput> {
    solve_with(
        cube,
        variant,
        config,
        init,
        SolveOptions {
            graph,
            ..SolveOptions::default()
        },
    )
}

pub fn solve_with(
    cube: &HyperCube,
    variant: SolverVariant,
    config: &SolverConfig,
    init: (&EndmemberMatrix, &AbundanceMatrix),
    options: SolveOptions<'_>,
) -> Result<SolveOutput> {
    config.validate()?;
    let (m0, a0) = init;
    let (l, n) = (cube.bands(), cube.pixels());
    let k = m0.count();
    if m0.bands() != l || a0.count() != k || a0.pixels() != n {
        return Err(UnmixError::Shape(format!(
            "init M {}x{}, A {}x{} against cube {l}x{n}",
            m0.bands(),
            k,
            a0.count(),
            a0.pixels()
        )));
    }
    if variant.graph_mode().is_some() {
        match options.graph {
            None => return Err(UnmixError::MissingGraph(variant.tag())),
            Some(g) if g.nodes() != n => {
                return Err(UnmixError::Shape(format!(
                    "graph has {} nodes for {n} pixels",
                    g.nodes()
                )))
            }
            _ => {}
        }
    }

    if config.max_iters == 0 {
        return Ok(SolveOutput {
            endmembers: m0.clone(),
            abundances: a0.clone(),
            objective_history: Vec::new(),
            diagnostics: Diagnostics {
                iterations: 0,
                converged: false,
                final_objective: f64::NAN,
                asc_delta: None,
                sigma: None,
                clamped_input: false,
            },
        });
    }

    let clamped_input = !cube.is_nonnegative();
    let x_raw = if clamped_input {
        warn!("cube has negative entries; clamping them to zero for factorisation");
        cube.clamped_data()
    } else {
        cube.data().clone()
    };

    let pca = (variant == SolverVariant::Mvcnmf).then(|| PcaProjection::fit(&x_raw, k - 1));

    let (x, m_init, asc_delta) = if config.sum_to_one {
        let delta = config.asc_delta.unwrap_or_else(|| default_asc_delta(&x_raw));
        (append_row(&x_raw, delta), append_row(m0.data(), delta), Some(delta))
    } else {
        (x_raw, m0.data().clone(), None)
    };

    let mut state = SolverState::new(m_init, a0.data().clone());
    state.fixed_rows = usize::from(config.sum_to_one);
    state.update_endmembers = !options.freeze_endmembers;
    state.anchor = options.anchor;
    state.x_norm2 = Some(x.norm_squared());
    if variant == SolverVariant::Dgs {
        state.h = match options.dgmap {
            Some(h) if h.len() == n => h,
            Some(h) => return Err(UnmixError::Shape(format!("DgMap of length {} for {n} pixels", h.len()))),
            None => DVector::from_iterator(
                n,
                a0.data()
                    .column_iter()
                    .map(|c| gini_sparsity(c.as_slice()).unwrap_or(0.0)),
            ),
        };
    }
    let sigma = match variant {
        SolverVariant::Cenmf => config.sigma.unwrap_or_else(|| default_sigma(&x, &state.m, &state.a)),
        _ => config.sigma.unwrap_or(1.0),
    };

    let f0 = objective(&state, &x, variant, config, options.graph, pca.as_ref(), sigma)?;
    state.objective_history.push(f0);

    let mut converged = false;
    for _ in 0..config.max_iters {
        step(&mut state, &x, variant, config, options.graph, pca.as_ref(), sigma)?;
        let hist = &state.objective_history;
        let (prev, cur) = (hist[hist.len() - 2], hist[hist.len() - 1]);
        let denom = prev.abs().max(f64::MIN_POSITIVE);
        if (prev - cur).abs() / denom < config.rel_tol {
            converged = true;
            break;
        }
    }

    let m_out = state.m.rows(0, l).into_owned();
    let mut a_out = state.a.clone();
    if config.sum_to_one {
        for (j, mut col) in a_out.column_iter_mut().enumerate() {
            let s = col.sum();
            if s > 0.0 {
                col /= s;
            } else {
                warn!("abundance column {j} vanished; left unnormalised");
            }
        }
    }
    let final_objective = *state.objective_history.last().unwrap_or(&f64::NAN);
    Ok(SolveOutput {
        endmembers: EndmemberMatrix::with_names(m_out, m0.names().to_vec())?,
        abundances: AbundanceMatrix::new(a_out)?,
        objective_history: state.objective_history,
        diagnostics: Diagnostics {
            iterations: state.iter,
            converged,
            final_objective,
            asc_delta,
            sigma: (variant == SolverVariant::Cenmf).then_some(sigma),
            clamped_input,
        },
    })
}
