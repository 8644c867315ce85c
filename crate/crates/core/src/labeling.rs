//! Ground-truth production: endmembers from seed pixels or reference
//! signatures, abundances from supervised unmixing with the endmembers
//! fixed, a rank-correlation check that similar pixels received similar
//! abundances, and the anchored conversion of class maps into abundances.

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UnmixError};
use crate::evaluation::sad;
use crate::graph::{build_graph, GraphMode, GraphSpec, LaplacianPair};
use crate::initializers::fcls;
use crate::model::{AbundanceMatrix, EndmemberMatrix, HyperCube, SIMPLEX_TOL};
use crate::solvers::{solve_with, Anchor, SolveOptions, SolverConfig, SolverVariant};

/// Labelled endmembers and abundances for one cube.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub endmembers: EndmemberMatrix,
    pub abundances: AbundanceMatrix,
    pub notes: Vec<String>,
}

impl GroundTruth {
    pub fn new(endmembers: EndmemberMatrix, abundances: AbundanceMatrix) -> Result<Self> {
        if endmembers.count() != abundances.count() {
            return Err(UnmixError::Shape(format!(
                "{} endmembers but {} abundance rows",
                endmembers.count(),
                abundances.count()
            )));
        }
        Ok(Self {
            endmembers,
            abundances,
            notes: Vec::new(),
        })
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.notes.push(note.into());
        self
    }
}

/// Where one endmember comes from. Pixel indices, grid cells and a
/// signature may be combined; the signature wins when present.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SeedEntry {
    pub name: String,
    pub pixels: Vec<usize>,
    /// `[row, col]` grid positions.
    pub cells: Vec<[usize; 2]>,
    pub signature: Option<Vec<f64>>,
}

impl SeedEntry {
    pub fn from_pixels(name: impl Into<String>, pixels: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            pixels,
            ..Self::default()
        }
    }

    pub fn from_signature(name: impl Into<String>, signature: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            signature: Some(signature),
            ..Self::default()
        }
    }

    fn pixel_set(&self, cube: &HyperCube) -> Result<Vec<usize>> {
        let mut out = self.pixels.clone();
        for &[r, c] in &self.cells {
            if r >= cube.rows() || c >= cube.cols() {
                return Err(UnmixError::InvalidParameter(format!(
                    "seed cell ({r}, {c}) outside the {}x{} grid",
                    cube.rows(),
                    cube.cols()
                )));
            }
            out.push(cube.pixel_index(r, c));
        }
        if let Some(&bad) = out.iter().find(|&&p| p >= cube.pixels()) {
            return Err(UnmixError::InvalidParameter(format!(
                "seed pixel {bad} outside {} pixels",
                cube.pixels()
            )));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EndmemberSeeds {
    #[serde(rename = "endmember")]
    pub entries: Vec<SeedEntry>,
}

impl EndmemberSeeds {
    pub fn new(entries: Vec<SeedEntry>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// How seed spectra are merged into one signature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    #[default]
    Mean,
    Median,
}

fn combine_columns(x: &DMatrix<f64>, pixels: &[usize], how: Combine) -> DVector<f64> {
    let l = x.nrows();
    match how {
        Combine::Mean => {
            let mut acc = DVector::zeros(l);
            for &p in pixels {
                acc += x.column(p);
            }
            acc / pixels.len() as f64
        }
        Combine::Median => DVector::from_fn(l, |b, _| {
            let mut v: Vec<f64> = pixels.iter().map(|&p| x[(b, p)]).collect();
            v.sort_by(f64::total_cmp);
            let h = v.len() / 2;
            if v.len() % 2 == 1 {
                v[h]
            } else {
                0.5 * (v[h - 1] + v[h])
            }
        }),
    }
}

/// One signature per seed entry: the reference signature verbatim, or the
/// mean (median) of the seed pixels. Negative noisy values are clamped.
pub fn label_endmembers(cube: &HyperCube, seeds: &EndmemberSeeds, how: Combine) -> Result<EndmemberMatrix> {
    if seeds.is_empty() {
        return Err(UnmixError::InvalidParameter("no endmember seeds".into()));
    }
    let l = cube.bands();
    let mut cols = Vec::with_capacity(seeds.len());
    for (k, entry) in seeds.entries.iter().enumerate() {
        let col = if let Some(sig) = &entry.signature {
            if sig.len() != l {
                return Err(UnmixError::Shape(format!(
                    "signature for endmember {k} has {} values for {l} bands",
                    sig.len()
                )));
            }
            DVector::from_column_slice(sig)
        } else {
            let pixels = entry.pixel_set(cube)?;
            if pixels.is_empty() {
                return Err(UnmixError::EmptySeed(k));
            }
            combine_columns(cube.data(), &pixels, how)
        };
        cols.push(col.map(|v| v.max(0.0)));
    }
    let names = seeds
        .entries
        .iter()
        .enumerate()
        .map(|(k, e)| {
            if e.name.is_empty() {
                format!("#{}", k + 1)
            } else {
                e.name.clone()
            }
        })
        .collect();
    EndmemberMatrix::with_names(DMatrix::from_columns(&cols), names)
}

/// Supervised abundance estimation with fixed endmembers.
#[derive(Debug, Clone, PartialEq)]
pub enum AbundanceMethod {
    Fcls,
    /// Abundance-only iterations of a solver variant, warm-started from
    /// FCLS.
    ConstrainedSolver {
        variant: SolverVariant,
        config: SolverConfig,
    },
}

/// Graph a variant needs on this cube, if any.
pub fn graph_for(cube: &HyperCube, variant: SolverVariant) -> Result<Option<LaplacianPair>> {
    match variant.graph_mode() {
        None => Ok(None),
        Some(GraphMode::Spectral) => Ok(Some(build_graph(cube, &GraphSpec::spectral())?)),
        Some(GraphMode::SpectralSpatial) => Ok(Some(build_graph(cube, &GraphSpec::spectral_spatial())?)),
    }
}

fn anchored_solve(
    cube: &HyperCube,
    m: &EndmemberMatrix,
    variant: SolverVariant,
    config: &SolverConfig,
    anchor: Option<Anchor>,
    freeze_endmembers: bool,
) -> Result<(EndmemberMatrix, AbundanceMatrix)> {
    let a0 = fcls(cube, m)?;
    let graph = graph_for(cube, variant)?;
    let out = solve_with(
        cube,
        variant,
        config,
        (m, &a0),
        SolveOptions {
            graph: graph.as_ref(),
            dgmap: None,
            anchor,
            freeze_endmembers,
        },
    )?;
    Ok((out.endmembers, out.abundances))
}

pub fn label_abundances(cube: &HyperCube, m: &EndmemberMatrix, method: &AbundanceMethod) -> Result<AbundanceMatrix> {
    match method {
        AbundanceMethod::Fcls => fcls(cube, m),
        AbundanceMethod::ConstrainedSolver { variant, config } => {
            Ok(anchored_solve(cube, m, *variant, config, None, true)?.1)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    /// Spearman correlation between pairwise spectral angles and pairwise
    /// abundance RMSE.
    pub rank_correlation: f64,
    /// `sqrt(mean((X - MA)^2))`.
    pub reconstruction_rmse: f64,
    pub pairs: usize,
    pub threshold: f64,
    pub passed: bool,
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            ranks[p] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() || a.len() < 2 {
        return 0.0;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va <= 0.0 || vb <= 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

pub const DEFAULT_VERIFY_THRESHOLD: f64 = 0.5;

/// Checks that similar pixels carry similar abundances over `probe_count`
/// random pixel pairs.
pub fn verify_labeling(
    cube: &HyperCube,
    gt: &GroundTruth,
    probe_count: usize,
    seed: u64,
) -> Result<VerificationReport> {
    verify_labeling_with(cube, gt, probe_count, seed, DEFAULT_VERIFY_THRESHOLD)
}

pub fn verify_labeling_with(
    cube: &HyperCube,
    gt: &GroundTruth,
    probe_count: usize,
    seed: u64,
    threshold: f64,
) -> Result<VerificationReport> {
    if probe_count < 2 {
        return Err(UnmixError::InvalidParameter(format!(
            "probe_count must be at least 2, got {probe_count}"
        )));
    }
    let (x, a) = (cube.data(), gt.abundances.data());
    if gt.endmembers.bands() != cube.bands() || a.ncols() != cube.pixels() {
        return Err(UnmixError::Shape("ground truth does not fit the cube".into()));
    }
    let n = cube.pixels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spectral = Vec::with_capacity(probe_count);
    let mut abundance = Vec::with_capacity(probe_count);
    for _ in 0..probe_count {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let d = sad(x.column(i).as_slice(), x.column(j).as_slice()).unwrap_or(std::f64::consts::FRAC_PI_2);
        let da = crate::evaluation::rmse(a.column(i).as_slice(), a.column(j).as_slice())?;
        spectral.push(d);
        abundance.push(da);
    }
    let rho = spearman(&spectral, &abundance);
    let residual = x - gt.endmembers.data() * a;
    let rec = (residual.norm_squared() / residual.len().max(1) as f64).sqrt();
    Ok(VerificationReport {
        rank_correlation: rho,
        reconstruction_rmse: rec,
        pairs: probe_count,
        threshold,
        passed: rho >= threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelCriteria {
    pub min_rank_correlation: f64,
    /// Reconstruction RMSE must stay strictly below this.
    pub max_reconstruction_rmse: Option<f64>,
    pub probe_count: usize,
    pub max_rounds: usize,
    /// Pixels kept per endmember when seeds are refined between rounds.
    pub refine_count: usize,
    pub seed: u64,
    pub combine: Combine,
}

impl Default for LabelCriteria {
    fn default() -> Self {
        Self {
            min_rank_correlation: DEFAULT_VERIFY_THRESHOLD,
            max_reconstruction_rmse: None,
            probe_count: 500,
            max_rounds: 5,
            refine_count: 10,
            seed: 0,
            combine: Combine::Mean,
        }
    }
}

impl LabelCriteria {
    fn accepts(&self, report: &VerificationReport) -> bool {
        report.rank_correlation >= self.min_rank_correlation
            && self
                .max_reconstruction_rmse
                .is_none_or(|m| report.reconstruction_rmse < m)
    }
}

#[derive(Debug, Clone)]
pub struct LabelOutcome {
    pub ground_truth: GroundTruth,
    pub report: VerificationReport,
    pub rounds: usize,
    pub verified: bool,
}

/// Pixels with the largest abundance of endmember `k`.
fn top_pixels(a: &DMatrix<f64>, k: usize, count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..a.ncols()).collect();
    idx.sort_by(|&i, &j| a[(k, j)].total_cmp(&a[(k, i)]).then(i.cmp(&j)));
    idx.truncate(count.max(1));
    idx
}

/// Alternates endmember labelling, abundance labelling and verification
/// until the criteria hold or the round budget runs out. Between rounds
/// pixel seeds are replaced by the pixels most attributed to each
/// endmember. Without success the best round is returned unverified.
pub fn label_ground_truth(
    cube: &HyperCube,
    seeds: &EndmemberSeeds,
    method: &AbundanceMethod,
    criteria: &LabelCriteria,
) -> Result<LabelOutcome> {
    if criteria.max_rounds == 0 {
        return Err(UnmixError::InvalidParameter("max_rounds must be at least 1".into()));
    }
    let mut current = seeds.clone();
    let mut best: Option<LabelOutcome> = None;
    for round in 1..=criteria.max_rounds {
        let m = label_endmembers(cube, &current, criteria.combine)?;
        let a = label_abundances(cube, &m, method)?;
        let gt = GroundTruth::new(m, a)?.with_note(format!("labelled in round {round}"));
        let mut report = verify_labeling_with(
            cube,
            &gt,
            criteria.probe_count,
            criteria.seed,
            criteria.min_rank_correlation,
        )?;
        report.passed = criteria.accepts(&report);
        info!(
            "labelling round {round}: rank correlation {:.4}, reconstruction RMSE {:.3e}",
            report.rank_correlation, report.reconstruction_rmse
        );
        let outcome = LabelOutcome {
            verified: report.passed,
            ground_truth: gt,
            report,
            rounds: round,
        };
        if outcome.verified {
            return Ok(outcome);
        }
        for (k, entry) in current.entries.iter_mut().enumerate() {
            if entry.signature.is_none() {
                entry.pixels = top_pixels(outcome.ground_truth.abundances.data(), k, criteria.refine_count);
                entry.cells.clear();
            }
        }
        let better = best
            .as_ref()
            .is_none_or(|b| outcome.report.rank_correlation > b.report.rank_correlation);
        if better {
            best = Some(outcome);
        }
    }
    let mut best = best.expect("at least one round ran");
    warn!("labelling criteria not met after {} rounds", criteria.max_rounds);
    best.rounds = criteria.max_rounds;
    best.ground_truth
        .notes
        .push(format!("unverified after {} rounds", criteria.max_rounds));
    Ok(best)
}

/// Per-pixel class indices, one class per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassLabelMap {
    labels: Vec<usize>,
    classes: usize,
}

impl ClassLabelMap {
    pub fn new(labels: Vec<usize>, classes: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
            return Err(UnmixError::InvalidData(format!(
                "class {bad} outside {classes} classes"
            )));
        }
        Ok(Self { labels, classes })
    }

    /// Classes are numbered `0..=max(labels)`.
    pub fn from_labels(labels: Vec<usize>) -> Result<Self> {
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        Self::new(labels, classes)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixels(&self) -> usize {
        self.labels.len()
    }

    pub fn members(&self, class: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&n| self.labels[n] == class).collect()
    }

    /// The `K x N` 0-1 matrix with one 1 per column.
    pub fn one_hot(&self) -> DMatrix<f64> {
        let mut y = DMatrix::zeros(self.classes, self.labels.len());
        for (n, &c) in self.labels.iter().enumerate() {
            y[(c, n)] = 1.0;
        }
        y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HycMode {
    #[default]
    FixedEndmembers,
    RefineEndmembers,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HycOptions {
    pub mode: HycMode,
    pub variant: SolverVariant,
    pub config: SolverConfig,
    /// Weight of `||A - Y||_F^2`.
    pub alpha: f64,
    pub combine: Combine,
    /// Share of each class, closest to its mean spectrum by angle, used for
    /// the candidate endmember.
    pub purity_percentile: f64,
}

impl Default for HycOptions {
    fn default() -> Self {
        Self {
            mode: HycMode::FixedEndmembers,
            variant: SolverVariant::Nmf,
            config: SolverConfig::default(),
            alpha: 1.0,
            combine: Combine::Mean,
            purity_percentile: 100.0,
        }
    }
}

/// Candidate endmembers as per-class mean (or median) spectra.
pub fn class_endmembers(
    cube: &HyperCube,
    labels: &ClassLabelMap,
    how: Combine,
    purity_percentile: f64,
) -> Result<EndmemberMatrix> {
    if labels.pixels() != cube.pixels() {
        return Err(UnmixError::Shape(format!(
            "{} labels for {} pixels",
            labels.pixels(),
            cube.pixels()
        )));
    }
    if !(purity_percentile > 0.0 && purity_percentile <= 100.0) {
        return Err(UnmixError::InvalidParameter(format!(
            "purity percentile {purity_percentile} outside (0, 100]"
        )));
    }
    let x = cube.data();
    let mut cols = Vec::with_capacity(labels.classes());
    for c in 0..labels.classes() {
        let mut members = labels.members(c);
        if members.is_empty() {
            return Err(UnmixError::EmptySeed(c));
        }
        if purity_percentile < 100.0 {
            let centre = combine_columns(x, &members, Combine::Mean);
            let mut scored: Vec<(f64, usize)> = members
                .iter()
                .map(|&p| {
                    (
                        sad(centre.as_slice(), x.column(p).as_slice()).unwrap_or(f64::INFINITY),
                        p,
                    )
                })
                .collect();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let keep = ((members.len() as f64 * purity_percentile / 100.0).ceil() as usize).max(1);
            members = scored.into_iter().take(keep).map(|(_, p)| p).collect();
        }
        cols.push(combine_columns(x, &members, how).map(|v| v.max(0.0)));
    }
    let names = (0..labels.classes()).map(|c| format!("class{c}")).collect();
    EndmemberMatrix::with_names(DMatrix::from_columns(&cols), names)
}

/// Turns a classification map into abundances anchored to the one-hot
/// labels: candidate endmembers are class spectra, and the base variant's
/// abundance rule runs on the objective extended by `alpha ||A - Y||^2`.
pub fn hyc_transform(cube: &HyperCube, labels: &ClassLabelMap, options: &HycOptions) -> Result<GroundTruth> {
    if !(options.alpha >= 0.0 && options.alpha.is_finite()) {
        return Err(UnmixError::InvalidParameter(format!(
            "anchor weight {} must be nonnegative",
            options.alpha
        )));
    }
    let m = class_endmembers(cube, labels, options.combine, options.purity_percentile)?;
    let anchor = (options.alpha > 0.0).then(|| Anchor {
        target: labels.one_hot(),
        weight: options.alpha,
    });
    let freeze = options.mode == HycMode::FixedEndmembers;
    let (m, a) = anchored_solve(cube, &m, options.variant, &options.config, anchor, freeze)?;
    let mut gt = GroundTruth::new(m, a)?;
    gt.notes.push(format!(
        "classification transform: {} mode, {} base, anchor weight {}",
        match options.mode {
            HycMode::FixedEndmembers => "fixed_endmembers",
            HycMode::RefineEndmembers => "refine_endmembers",
        },
        options.variant,
        options.alpha
    ));
    if !gt.abundances.is_on_simplex(SIMPLEX_TOL) {
        gt.notes.push("abundances off the simplex".into());
    }
    Ok(gt)
}
