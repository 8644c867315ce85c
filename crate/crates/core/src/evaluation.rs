//! Spectral angle and abundance RMSE scores, with endmembers aligned to the
//! ground truth by an optimal assignment on the angle matrix.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UnmixError};
use crate::labeling::GroundTruth;
use crate::model::{AbundanceMatrix, EndmemberMatrix};

/// Spectral angle in radians.
pub fn sad(m: &[f64], m_hat: &[f64]) -> Result<f64> {
    if m.len() != m_hat.len() {
        return Err(UnmixError::Shape(format!(
            "spectra of length {} and {}",
            m.len(),
            m_hat.len()
        )));
    }
    let na = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = m_hat.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(UnmixError::InvalidData("spectral angle of a zero vector".into()));
    }
    let dot: f64 = m.iter().zip(m_hat).map(|(a, b)| a * b).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0).acos())
}

/// `sqrt(mean((a - a_hat)^2))`.
pub fn rmse(a: &[f64], a_hat: &[f64]) -> Result<f64> {
    if a.len() != a_hat.len() {
        return Err(UnmixError::Shape(format!(
            "rows of length {} and {}",
            a.len(),
            a_hat.len()
        )));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a.iter().zip(a_hat).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((s / a.len() as f64).sqrt())
}

/// `C[i, j] = sad(gt_i, est_j)`.
pub fn sad_matrix(m_gt: &DMatrix<f64>, m_est: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m_gt.nrows() != m_est.nrows() {
        return Err(UnmixError::Shape(format!(
            "{} vs {} bands",
            m_gt.nrows(),
            m_est.nrows()
        )));
    }
    let mut c = DMatrix::zeros(m_gt.ncols(), m_est.ncols());
    for i in 0..m_gt.ncols() {
        for j in 0..m_est.ncols() {
            c[(i, j)] = sad(m_gt.column(i).as_slice(), m_est.column(j).as_slice())?;
        }
    }
    Ok(c)
}

/// Assignment minimising the summed cost of a square matrix; `perm[i]` is
/// the column given to row `i`. Among optimal assignments the
/// lexicographically smallest is returned.
pub fn optimal_assignment(cost: &DMatrix<f64>) -> Result<Vec<usize>> {
    let k = cost.nrows();
    if cost.ncols() != k {
        return Err(UnmixError::Shape(format!(
            "cost matrix {:?} is not square",
            cost.shape()
        )));
    }
    if k > 20 {
        return Err(UnmixError::Unsupported(format!("assignment over {k} endmembers")));
    }
    let full = (1usize << k) - 1;
    // best[mask]: cheapest completion for rows popcount(mask).. given the
    // columns in mask are taken
    let mut best = vec![f64::INFINITY; 1 << k];
    best[full] = 0.0;
    for mask in (0..full).rev() {
        let row = mask.count_ones() as usize;
        let mut b = f64::INFINITY;
        for j in 0..k {
            if mask & (1 << j) == 0 {
                b = b.min(cost[(row, j)] + best[mask | (1 << j)]);
            }
        }
        best[mask] = b;
    }
    let mut perm = Vec::with_capacity(k);
    let mut mask = 0usize;
    for row in 0..k {
        let target = best[mask];
        let tol = 1e-12 * (1.0 + target.abs());
        let j = (0..k)
            .filter(|j| mask & (1 << j) == 0)
            .find(|&j| cost[(row, j)] + best[mask | (1 << j)] <= target + tol)
            .expect("a completion attains the minimum");
        perm.push(j);
        mask |= 1 << j;
    }
    Ok(perm)
}

/// `perm[i]` is the estimated endmember matched to ground-truth endmember
/// `i`, minimising the total spectral angle.
pub fn match_endmembers(m_gt: &EndmemberMatrix, m_est: &EndmemberMatrix) -> Result<Vec<usize>> {
    if m_gt.count() != m_est.count() {
        return Err(UnmixError::Shape(format!(
            "{} ground-truth endmembers, {} estimated",
            m_gt.count(),
            m_est.count()
        )));
    }
    optimal_assignment(&sad_matrix(m_gt.data(), m_est.data())?)
}

/// Per-endmember scores after alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub names: Vec<String>,
    pub sad: Vec<f64>,
    pub rmse: Vec<f64>,
    pub mean_sad: f64,
    pub mean_rmse: f64,
    pub permutation: Vec<usize>,
    /// Estimated abundance columns were rescaled to unit sum before RMSE.
    pub projected_abundances: bool,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl BenchmarkReport {
    /// Element-wise mean of several reports over the same endmembers.
    pub fn average(reports: &[BenchmarkReport]) -> Result<BenchmarkReport> {
        let first = reports
            .first()
            .ok_or_else(|| UnmixError::InvalidParameter("no reports to average".into()))?;
        let k = first.names.len();
        if reports.iter().any(|r| r.sad.len() != k || r.rmse.len() != k) {
            return Err(UnmixError::Shape("reports cover different endmembers".into()));
        }
        let r = reports.len() as f64;
        let sad: Vec<f64> = (0..k)
            .map(|i| reports.iter().map(|x| x.sad[i]).sum::<f64>() / r)
            .collect();
        let rmse: Vec<f64> = (0..k)
            .map(|i| reports.iter().map(|x| x.rmse[i]).sum::<f64>() / r)
            .collect();
        Ok(BenchmarkReport {
            names: first.names.clone(),
            mean_sad: mean(&sad),
            mean_rmse: mean(&rmse),
            sad,
            rmse,
            permutation: Vec::new(),
            projected_abundances: first.projected_abundances,
        })
    }
}

fn unit_sum_columns(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    for mut col in out.column_iter_mut() {
        let s = col.sum();
        if s > 0.0 {
            col /= s;
        }
    }
    out
}

/// Scores an estimate against ground truth. Abundance rows follow the same
/// permutation as the endmembers.
pub fn evaluate(gt: &GroundTruth, est: (&EndmemberMatrix, &AbundanceMatrix)) -> Result<BenchmarkReport> {
    evaluate_with(gt, est, true)
}

pub fn evaluate_with(
    gt: &GroundTruth,
    est: (&EndmemberMatrix, &AbundanceMatrix),
    project_abundances: bool,
) -> Result<BenchmarkReport> {
    let (m_est, a_est) = est;
    let (m_gt, a_gt) = (&gt.endmembers, &gt.abundances);
    if a_est.count() != m_est.count() || a_est.pixels() != a_gt.pixels() {
        return Err(UnmixError::Shape(format!(
            "estimate A is {}x{}, ground truth {}x{}",
            a_est.count(),
            a_est.pixels(),
            a_gt.count(),
            a_gt.pixels()
        )));
    }
    let perm = match_endmembers(m_gt, m_est)?;
    let a_hat = if project_abundances {
        unit_sum_columns(a_est.data())
    } else {
        a_est.data().clone()
    };
    let mut sads = Vec::with_capacity(perm.len());
    let mut rmses = Vec::with_capacity(perm.len());
    for (i, &j) in perm.iter().enumerate() {
        sads.push(sad(
            m_gt.data().column(i).as_slice(),
            m_est.data().column(j).as_slice(),
        )?);
        let truth: Vec<f64> = a_gt.data().row(i).iter().copied().collect();
        let guess: Vec<f64> = a_hat.row(j).iter().copied().collect();
        rmses.push(rmse(&truth, &guess)?);
    }
    Ok(BenchmarkReport {
        names: m_gt.names().to_vec(),
        mean_sad: mean(&sads),
        mean_rmse: mean(&rmses),
        sad: sads,
        rmse: rmses,
        permutation: perm,
        projected_abundances: project_abundances,
    })
}

/// Mean spectral angle after matching, for scoring endmembers alone.
pub fn mean_matched_sad(m_gt: &EndmemberMatrix, m_est: &EndmemberMatrix) -> Result<f64> {
    let cost = sad_matrix(m_gt.data(), m_est.data())?;
    let perm = match_endmembers(m_gt, m_est)?;
    Ok(mean(
        &perm.iter().enumerate().map(|(i, &j)| cost[(i, j)]).collect::<Vec<_>>(),
    ))
}
