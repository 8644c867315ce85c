//! Endmember extraction and supervised abundance estimation used to start
//! the solvers and to label ground truth.

mod fcls;
mod vca;

pub use fcls::{fcls, fcls_augmented, nnls_gram, simplex_least_squares, SimplexLsq};
pub use vca::{vca, vca_detailed, VcaBranch, VcaOutput};

use crate::error::Result;
use crate::model::{AbundanceMatrix, EndmemberMatrix, HyperCube};

/// VCA endmembers followed by FCLS abundances.
pub fn init_pair(cube: &HyperCube, k: usize, seed: u64) -> Result<(EndmemberMatrix, AbundanceMatrix)> {
    let (m, _) = vca(cube, k, seed)?;
    let a = fcls(cube, &m)?;
    Ok((m, a))
}
