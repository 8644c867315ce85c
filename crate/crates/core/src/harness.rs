//! Experiment runners: scene generation, single unmixing runs, ground-truth
//! labelling and the benchmark protocol (coarse-to-fine search over the
//! regularisation weights, seeded repetitions at the winner, mean tables).
//!
//! Every report embeds the configuration that produced it, so rerunning
//! with the same inputs reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UnmixError};
use crate::evaluation::{evaluate, BenchmarkReport};
use crate::graph::LaplacianPair;
use crate::initializers::init_pair;
use crate::io;
use crate::labeling::{
    graph_for, label_ground_truth, AbundanceMethod, EndmemberSeeds, GroundTruth, LabelCriteria, LabelOutcome,
};
use crate::model::{AbundanceMatrix, EndmemberMatrix, HyperCube};
use crate::solvers::{solve, SolveOutput, SolverConfig, SolverVariant};
use crate::synthetic::{generate_scene, SceneConfig, SyntheticScene};

pub const COARSE_LAMBDAS: [f64; 6] = [1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2];

/// Hyperparameter grid. `alphas` is searched jointly with `lambdas` for
/// variants that take both weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub lambdas: Vec<f64>,
    pub alphas: Vec<f64>,
    /// Points of the refinement pass, spread log-evenly over one decade
    /// centred on the coarse winner; 0 disables refinement.
    pub fine_points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lambdas: COARSE_LAMBDAS.to_vec(),
            alphas: COARSE_LAMBDAS.to_vec(),
            fine_points: 5,
        }
    }
}

impl GridSpec {
    /// One point, no refinement.
    pub fn single(lambda: f64, alpha: f64) -> Self {
        Self {
            lambdas: vec![lambda],
            alphas: vec![alpha],
            fine_points: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.alphas.is_empty() {
            return Err(UnmixError::InvalidParameter(
                "grid needs at least one lambda and one alpha".into(),
            ));
        }
        if self
            .lambdas
            .iter()
            .chain(&self.alphas)
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(UnmixError::InvalidParameter(
                "grid values must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Parses `coarse`, or `key=v1,v2;...` with keys `lambda`, `alpha` and
    /// `fine`.
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if text.eq_ignore_ascii_case("coarse") || text.is_empty() {
            return Ok(Self::default());
        }
        let mut grid = Self::default();
        let mut saw_lambda = false;
        let mut saw_alpha = false;
        for part in text.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, values) = part
                .split_once('=')
                .ok_or_else(|| UnmixError::Parse(format!("grid entry `{part}` lacks `=`")))?;
            let nums = || -> Result<Vec<f64>> {
                values
                    .split(',')
                    .map(|v| {
                        v.trim()
                            .parse::<f64>()
                            .map_err(|_| UnmixError::Parse(format!("grid value `{}` is not a number", v.trim())))
                    })
                    .collect()
            };
            match key.trim() {
                "lambda" => {
                    grid.lambdas = nums()?;
                    saw_lambda = true;
                }
                "alpha" => {
                    grid.alphas = nums()?;
                    saw_alpha = true;
                }
                "fine" => {
                    grid.fine_points = values
                        .trim()
                        .parse()
                        .map_err(|_| UnmixError::Parse(format!("fine point count `{values}`")))?
                }
                other => return Err(UnmixError::Parse(format!("unknown grid key `{other}`"))),
            }
        }
        // explicit single values read as fixed settings
        if saw_lambda && grid.lambdas.len() == 1 && (!saw_alpha || grid.alphas.len() == 1) && !text.contains("fine") {
            grid.fine_points = 0;
        }
        if !saw_alpha && saw_lambda && grid.lambdas.len() == 1 {
            grid.alphas = vec![grid.lambdas[0]];
        }
        grid.validate()?;
        Ok(grid)
    }

    fn coarse_points(&self, variant: SolverVariant) -> Vec<(f64, f64)> {
        if !variant.uses_lambda() {
            return vec![(0.0, 0.0)];
        }
        if variant.uses_alpha() {
            self.lambdas
                .iter()
                .flat_map(|&l| self.alphas.iter().map(move |&a| (l, a)))
                .collect()
        } else {
            self.lambdas.iter().map(|&l| (l, 0.0)).collect()
        }
    }

    fn searches(&self, variant: SolverVariant) -> bool {
        variant.uses_lambda() && self.coarse_points(variant).len() > 1
    }
}

/// Log-spaced refinement points around `centre`, spanning one decade.
pub fn fine_grid(centre: f64, points: usize) -> Vec<f64> {
    if points == 0 || centre <= 0.0 {
        return vec![centre];
    }
    if points == 1 {
        return vec![centre];
    }
    (0..points)
        .map(|i| centre * 10f64.powf(-0.5 + i as f64 / (points - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub variants: Vec<SolverVariant>,
    pub repetitions: usize,
    /// Repetitions per grid point while searching.
    pub tune_repetitions: usize,
    pub seed: u64,
    /// Also score the VCA/FCLS initialisation on its own.
    pub baseline: bool,
    pub grid: GridSpec,
    pub solver: SolverConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            variants: vec![SolverVariant::Nmf],
            repetitions: 50,
            tune_repetitions: 1,
            seed: 0,
            baseline: true,
            grid: GridSpec::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl BenchConfig {
    /// Small preset for continuous integration.
    pub fn ci() -> Self {
        Self {
            repetitions: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(UnmixError::InvalidParameter("no variants to bench".into()));
        }
        if self.repetitions == 0 || self.tune_repetitions == 0 {
            return Err(UnmixError::InvalidParameter("repetitions must be positive".into()));
        }
        self.grid.validate()?;
        self.solver.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| UnmixError::Parse(e.to_string()))
    }
}

/// One evaluated `(lambda, alpha)` point of the search.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub lambda: f64,
    pub alpha: f64,
    pub mean_sad: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub name: String,
    pub variant: Option<SolverVariant>,
    pub lambda: f64,
    pub alpha: f64,
    pub search: Vec<GridPoint>,
    /// Successful repetitions, in seed order.
    pub runs: Vec<(u64, BenchmarkReport)>,
    pub failures: Vec<(u64, String)>,
    /// `None` when every repetition failed.
    pub mean: Option<BenchmarkReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub endmember_names: Vec<String>,
    pub methods: Vec<MethodResult>,
}

type RunKey = (u64, u64, u64);

struct Runner<'a> {
    cube: &'a HyperCube,
    gt: &'a GroundTruth,
    base: &'a SolverConfig,
    k: usize,
    inits: BTreeMap<u64, (EndmemberMatrix, AbundanceMatrix)>,
    graphs: BTreeMap<SolverVariant, Option<LaplacianPair>>,
}

impl<'a> Runner<'a> {
    fn init(&mut self, seed: u64) -> Result<(EndmemberMatrix, AbundanceMatrix)> {
        if let Some(pair) = self.inits.get(&seed) {
            return Ok(pair.clone());
        }
        let pair = init_pair(self.cube, self.k, seed)?;
        self.inits.insert(seed, pair.clone());
        Ok(pair)
    }

    fn graph(&mut self, variant: SolverVariant) -> Result<Option<&LaplacianPair>> {
        if !self.graphs.contains_key(&variant) {
            let g = graph_for(self.cube, variant)?;
            self.graphs.insert(variant, g);
        }
        Ok(self.graphs[&variant].as_ref())
    }

    fn run(&mut self, variant: SolverVariant, lambda: f64, alpha: f64, seed: u64) -> Result<BenchmarkReport> {
        let (m0, a0) = self.init(seed)?;
        let config = SolverConfig {
            lambda,
            alpha,
            seed,
            ..self.base.clone()
        };
        let cube = self.cube;
        let graph = self.graph(variant)?;
        let SolveOutput {
            endmembers, abundances, ..
        } = solve(cube, variant, &config, (&m0, &a0), graph)?;
        evaluate(self.gt, (&endmembers, &abundances))
    }

    fn baseline(&mut self, seed: u64) -> Result<BenchmarkReport> {
        let (m0, a0) = self.init(seed)?;
        evaluate(self.gt, (&m0, &a0))
    }
}

fn key(lambda: f64, alpha: f64, seed: u64) -> RunKey {
    (lambda.to_bits(), alpha.to_bits(), seed)
}

struct Cache {
    runs: BTreeMap<RunKey, std::result::Result<BenchmarkReport, String>>,
}

impl Cache {
    fn get(
        &mut self,
        runner: &mut Runner<'_>,
        variant: SolverVariant,
        lambda: f64,
        alpha: f64,
        seed: u64,
    ) -> std::result::Result<BenchmarkReport, String> {
        self.runs
            .entry(key(lambda, alpha, seed))
            .or_insert_with(|| {
                runner.run(variant, lambda, alpha, seed).map_err(|e| {
                    warn!("{variant} lambda={lambda:e} alpha={alpha:e} seed={seed} failed: {e}");
                    e.to_string()
                })
            })
            .clone()
    }
}

fn score_point(
    cache: &mut Cache,
    runner: &mut Runner<'_>,
    variant: SolverVariant,
    (lambda, alpha): (f64, f64),
    seeds: &[u64],
) -> GridPoint {
    let mut sads = Vec::new();
    let mut failures = 0;
    for &s in seeds {
        match cache.get(runner, variant, lambda, alpha, s) {
            Ok(r) => sads.push(r.mean_sad),
            Err(_) => failures += 1,
        }
    }
    let mean_sad = if sads.is_empty() {
        f64::INFINITY
    } else {
        sads.iter().sum::<f64>() / sads.len() as f64
    };
    GridPoint {
        lambda,
        alpha,
        mean_sad,
        failures,
    }
}

/// Lowest mean SAD; ties keep the earlier point.
fn best(points: &[GridPoint]) -> &GridPoint {
    points
        .iter()
        .fold(&points[0], |b, p| if p.mean_sad < b.mean_sad { p } else { b })
}

fn collect(
    name: String,
    variant: Option<SolverVariant>,
    lambda: f64,
    alpha: f64,
    search: Vec<GridPoint>,
    results: Vec<(u64, std::result::Result<BenchmarkReport, String>)>,
) -> Result<MethodResult> {
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(rep) => runs.push((seed, rep)),
            Err(e) => failures.push((seed, e)),
        }
    }
    let mean = if runs.is_empty() {
        None
    } else {
        let reports: Vec<BenchmarkReport> = runs.iter().map(|(_, r)| r.clone()).collect();
        Some(BenchmarkReport::average(&reports)?)
    };
    Ok(MethodResult {
        name,
        variant,
        lambda,
        alpha,
        search,
        runs,
        failures,
        mean,
    })
}

/// Tunes each variant on the grid by mean SAD, then averages
/// `repetitions` runs (seeds `seed + r`) at the winning weights. Failed
/// runs are left out of the means and listed in the result.
pub fn bench(cube: &HyperCube, gt: &GroundTruth, config: &BenchConfig) -> Result<BenchResult> {
    config.validate()?;
    if gt.abundances.pixels() != cube.pixels() || gt.endmembers.bands() != cube.bands() {
        return Err(UnmixError::Shape(format!(
            "ground truth is {}x{} over {} pixels, cube {}x{}",
            gt.endmembers.bands(),
            gt.endmembers.count(),
            gt.abundances.pixels(),
            cube.bands(),
            cube.pixels()
        )));
    }
    let mut runner = Runner {
        cube,
        gt,
        base: &config.solver,
        k: gt.endmembers.count(),
        inits: BTreeMap::new(),
        graphs: BTreeMap::new(),
    };
    let rep_seeds: Vec<u64> = (0..config.repetitions as u64).map(|r| config.seed + r).collect();
    let tune_seeds: Vec<u64> = (0..config.tune_repetitions as u64).map(|r| config.seed + r).collect();
    let mut methods = Vec::new();

    if config.baseline {
        let results = rep_seeds
            .iter()
            .map(|&s| (s, runner.baseline(s).map_err(|e| e.to_string())))
            .collect();
        methods.push(collect("vca".into(), None, 0.0, 0.0, Vec::new(), results)?);
    }

    for &variant in &config.variants {
        let mut cache = Cache { runs: BTreeMap::new() };
        let coarse = config.grid.coarse_points(variant);
        let mut search = Vec::new();
        let (lambda, alpha) = if config.grid.searches(variant) {
            for &p in &coarse {
                search.push(score_point(&mut cache, &mut runner, variant, p, &tune_seeds));
            }
            let w = best(&search).clone();
            if config.grid.fine_points > 0 {
                for l in fine_grid(w.lambda, config.grid.fine_points) {
                    if search.iter().any(|p| p.lambda == l && p.alpha == w.alpha) {
                        continue;
                    }
                    search.push(score_point(&mut cache, &mut runner, variant, (l, w.alpha), &tune_seeds));
                }
            }
            let w = best(&search);
            (w.lambda, w.alpha)
        } else {
            coarse[0]
        };
        info!("{variant}: lambda={lambda:e} alpha={alpha:e}");
        let results = rep_seeds
            .iter()
            .map(|&s| (s, cache.get(&mut runner, variant, lambda, alpha, s)))
            .collect();
        methods.push(collect(
            variant.tag().into(),
            Some(variant),
            lambda,
            alpha,
            search,
            results,
        )?);
    }

    Ok(BenchResult {
        endmember_names: gt.endmembers.names().to_vec(),
        methods,
    })
}

fn fmt_value(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "nan".into()
    }
}

fn table(out: &mut String, title: &str, result: &BenchResult, pick: impl Fn(&BenchmarkReport) -> (&[f64], f64)) {
    let _ = writeln!(out, "# table: {title}");
    let header: Vec<&str> = result.methods.iter().map(|m| m.name.as_str()).collect();
    let _ = writeln!(out, "endmember,{}", header.join(","));
    for (i, name) in result.endmember_names.iter().enumerate() {
        let cells: Vec<String> = result
            .methods
            .iter()
            .map(|m| m.mean.as_ref().map_or("nan".into(), |r| fmt_value(pick(r).0[i])))
            .collect();
        let _ = writeln!(out, "{name},{}", cells.join(","));
    }
    let avg: Vec<String> = result
        .methods
        .iter()
        .map(|m| m.mean.as_ref().map_or("nan".into(), |r| fmt_value(pick(r).1)))
        .collect();
    let _ = writeln!(out, "Avg.,{}", avg.join(","));
}

/// SAD and RMSE tables (endmember rows, method columns, `Avg.` row) under
/// `#` lines holding the provenance, the chosen weights and failure counts.
pub fn render_report(result: &BenchResult, config: &BenchConfig, provenance: &[String]) -> Result<String> {
    let mut out = String::new();
    for line in provenance {
        let _ = writeln!(out, "# {line}");
    }
    for line in config.to_toml()?.lines() {
        let _ = writeln!(out, "{}", format!("# config: {line}").trim_end());
    }
    for m in &result.methods {
        let _ = writeln!(
            out,
            "# method: {} lambda={:e} alpha={:e} runs={} failures={}",
            m.name,
            m.lambda,
            m.alpha,
            m.runs.len(),
            m.failures.len()
        );
        for p in &m.search {
            let _ = writeln!(
                out,
                "# search: {} lambda={:e} alpha={:e} mean_sad={} failures={}",
                m.name,
                p.lambda,
                p.alpha,
                fmt_value(p.mean_sad),
                p.failures
            );
        }
        for (seed, e) in &m.failures {
            let _ = writeln!(out, "# failure: {} seed={seed} {}", m.name, e.replace('\n', " "));
        }
    }
    table(&mut out, "sad", result, |r| (&r.sad, r.mean_sad));
    table(&mut out, "rmse", result, |r| (&r.rmse, r.mean_rmse));
    Ok(out)
}

/// Per-run scores, one line per (method, seed, endmember).
pub fn render_runs(result: &BenchResult) -> String {
    let mut out = String::from("method,seed,endmember,sad,rmse\n");
    for m in &result.methods {
        for (seed, r) in &m.runs {
            for (i, name) in r.names.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{seed},{name},{},{}",
                    m.name,
                    fmt_value(r.sad[i]),
                    fmt_value(r.rmse[i])
                );
            }
        }
    }
    out
}

/// Reads a TOML config file; missing keys take their defaults and no file
/// means all defaults.
pub fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| UnmixError::io(path, e))?;
    toml::from_str(&text).map_err(|e| UnmixError::Parse(format!("{}: {e}", path.display())))
}

pub const CUBE_STEM: &str = "cube";
pub const GT_STEM: &str = "gt";

pub fn cube_path(dir: &Path) -> PathBuf {
    dir.join(CUBE_STEM)
}

pub fn gt_path(dir: &Path) -> PathBuf {
    dir.join(GT_STEM)
}

/// Writes `cube`, `gt_M`, `gt_A` and `scene.toml` into `dir`.
pub fn run_generate(config: &SceneConfig, dir: &Path) -> Result<SyntheticScene> {
    let scene = generate_scene(config)?;
    info!("achieved SNR {:.3} dB", scene.achieved_snr_db);
    io::save_cube(&scene.cube, cube_path(dir))?;
    let gt = GroundTruth::new(scene.endmembers.clone(), scene.abundances.clone())?;
    io::save_ground_truth(&gt, Some((scene.cube.rows(), scene.cube.cols())), gt_path(dir))?;
    let mut text = toml::to_string(config).map_err(|e| UnmixError::Parse(e.to_string()))?;
    let _ = writeln!(text, "\n# achieved_snr_db = {}", scene.achieved_snr_db);
    io::write_text(dir.join("scene.toml"), &text)?;
    Ok(scene)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunRecord {
    variant: SolverVariant,
    endmembers: usize,
    seed: u64,
    iterations: usize,
    converged: bool,
    solver: SolverConfig,
}

/// VCA/FCLS start, one solve, then `endmembers`, `abundances`,
/// `history.txt` and `run.toml` in `dir`.
pub fn run_unmix(
    cube: &HyperCube,
    k: usize,
    variant: SolverVariant,
    config: &SolverConfig,
    seed: u64,
    dir: &Path,
) -> Result<SolveOutput> {
    config.validate()?;
    let (m0, a0) = init_pair(cube, k, seed)?;
    let graph = graph_for(cube, variant)?;
    let config = SolverConfig { seed, ..config.clone() };
    let out = solve(cube, variant, &config, (&m0, &a0), graph.as_ref())?;
    io::save_endmembers(&out.endmembers, dir.join("endmembers"))?;
    io::save_abundances(
        &out.abundances,
        Some((cube.rows(), cube.cols())),
        dir.join("abundances"),
    )?;
    let mut history = String::new();
    for f in &out.objective_history {
        let _ = writeln!(history, "{f:e}");
    }
    io::write_text(dir.join("history.txt"), &history)?;
    let record = RunRecord {
        variant,
        endmembers: k,
        seed,
        iterations: out.diagnostics.iterations,
        converged: out.diagnostics.converged,
        solver: config,
    };
    let text = toml::to_string(&record).map_err(|e| UnmixError::Parse(e.to_string()))?;
    io::write_text(dir.join("run.toml"), &text)?;
    Ok(out)
}

/// Loads the `endmembers`/`abundances` pair written by [`run_unmix`].
pub fn load_estimate(dir: &Path) -> Result<(EndmemberMatrix, AbundanceMatrix)> {
    Ok((
        io::load_endmembers(dir.join("endmembers"))?,
        io::load_abundances(dir.join("abundances"))?,
    ))
}

/// Labelling settings read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelConfig {
    /// `fcls` or a solver tag for abundance-only iterations.
    pub method: String,
    pub solver: SolverConfig,
    pub criteria: LabelCriteria,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            method: "fcls".into(),
            solver: SolverConfig::default(),
            criteria: LabelCriteria::default(),
        }
    }
}

impl LabelConfig {
    pub fn abundance_method(&self) -> Result<AbundanceMethod> {
        if self.method.trim().eq_ignore_ascii_case("fcls") {
            Ok(AbundanceMethod::Fcls)
        } else {
            Ok(AbundanceMethod::ConstrainedSolver {
                variant: self.method.parse()?,
                config: self.solver.clone(),
            })
        }
    }
}

/// Runs the labelling loop and writes `gt_M`, `gt_A` and
/// `verification.toml` into `dir`, verified or not.
pub fn run_label(cube: &HyperCube, seeds: &EndmemberSeeds, config: &LabelConfig, dir: &Path) -> Result<LabelOutcome> {
    let method = config.abundance_method()?;
    let outcome = label_ground_truth(cube, seeds, &method, &config.criteria)?;
    io::save_ground_truth(&outcome.ground_truth, Some((cube.rows(), cube.cols())), gt_path(dir))?;
    #[derive(Serialize)]
    struct Record<'a> {
        verified: bool,
        rounds: usize,
        report: &'a crate::labeling::VerificationReport,
        config: &'a LabelConfig,
    }
    let text = toml::to_string(&Record {
        verified: outcome.verified,
        rounds: outcome.rounds,
        report: &outcome.report,
        config,
    })
    .map_err(|e| UnmixError::Parse(e.to_string()))?;
    io::write_text(dir.join("verification.toml"), &text)?;
    Ok(outcome)
}

/// Single-estimate report in the bench table layout.
pub fn render_evaluation(report: &BenchmarkReport, provenance: &[String]) -> String {
    let mut out = String::new();
    for line in provenance {
        let _ = writeln!(out, "# {line}");
    }
    let perm: Vec<String> = report.permutation.iter().map(usize::to_string).collect();
    let _ = writeln!(out, "# permutation: {}", perm.join(" "));
    let _ = writeln!(out, "endmember,sad,rmse");
    for (i, name) in report.names.iter().enumerate() {
        let _ = writeln!(out, "{name},{},{}", fmt_value(report.sad[i]), fmt_value(report.rmse[i]));
    }
    let _ = writeln!(
        out,
        "Avg.,{},{}",
        fmt_value(report.mean_sad),
        fmt_value(report.mean_rmse)
    );
    out
}
