//! `unmix`: generate synthetic scenes, unmix cubes, label ground truth,
//! score estimates and run benchmarks.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 when a run fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use unmix_core::evaluation::evaluate;
use unmix_core::harness::{self, BenchConfig, GridSpec, LabelConfig};
use unmix_core::io::{self, BandRemovalList};
use unmix_core::solvers::{SolverConfig, SolverVariant};
use unmix_core::synthetic::SceneConfig;
use unmix_core::{GroundTruth, HyperCube, UnmixError};

#[derive(Parser)]
#[command(name = "unmix", version, about = "Hyperspectral unmixing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cube and its ground truth into a directory
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Factorise a cube from a VCA/FCLS start
    Unmix {
        /// Cube stem or .hdr path
        cube: PathBuf,
        /// Number of endmembers
        #[arg(short = 'k', long)]
        endmembers: usize,
        #[arg(long, default_value = "nmf")]
        variant: SolverVariant,
        #[command(flatten)]
        common: Common,
        /// Band-removal preset applied to the cube
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label ground truth from seed pixels and verify it
    Label {
        cube: PathBuf,
        /// TOML file of [[endmember]] seeds
        #[arg(long)]
        seeds: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an estimate directory against ground truth
    Evaluate {
        /// Ground-truth stem (files <stem>_M and <stem>_A)
        #[arg(long)]
        gt: PathBuf,
        /// Directory written by `unmix unmix`
        #[arg(long)]
        estimate: PathBuf,
        /// Report file; stdout when absent
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid-search, repeat and tabulate SAD/RMSE per variant
    Bench {
        cube: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Comma-separated variant tags
        #[arg(long, value_delimiter = ',')]
        variant: Vec<SolverVariant>,
        #[arg(long)]
        reps: Option<usize>,
        /// `coarse` or `lambda=..;alpha=..;fine=..`
        #[arg(long)]
        grid: Option<String>,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preset: Option<String>,
        /// Report file
        #[arg(long)]
        out: PathBuf,
        /// Also write per-run scores next to the report
        #[arg(long)]
        runs: bool,
    },
}

enum Failure {
    Usage(String),
    Runtime(UnmixError),
}

impl From<UnmixError> for Failure {
    fn from(e: UnmixError) -> Self {
        match e {
            UnmixError::InvalidParameter(_) | UnmixError::Parse(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other),
        }
    }
}

fn load_input(path: &Path, preset: Option<&str>) -> Result<HyperCube, Failure> {
    let cube = io::load_cube(path)?;
    match preset {
        None => Ok(cube),
        Some(name) => {
            let list = BandRemovalList::preset(name)?;
            let out = io::apply_band_removal(&cube, &list)?;
            info!("preset {name}: {} of {} bands kept", out.bands(), cube.bands());
            Ok(out)
        }
    }
}

fn load_gt(path: &Path, preset: Option<&str>) -> Result<GroundTruth, Failure> {
    let gt = io::load_ground_truth(path)?;
    let Some(name) = preset else { return Ok(gt) };
    let list = BandRemovalList::preset(name)?;
    if gt.endmembers.bands() != list.original_bands {
        return Ok(gt);
    }
    let m = io::remove_endmember_bands(&gt.endmembers, &list)?;
    let notes = gt.notes.clone();
    let mut out = GroundTruth::new(m, gt.abundances)?;
    out.notes = notes;
    Ok(out)
}

fn provenance(command: &str, inputs: &[(&str, &Path)]) -> Vec<String> {
    let mut lines = vec![format!("unmix {} {command}", env!("CARGO_PKG_VERSION"))];
    lines.extend(inputs.iter().map(|(k, p)| format!("{k}: {}", p.display())));
    lines
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate { common, out } => {
            let mut config: SceneConfig = harness::read_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                config.seed = s;
            }
            config.validate()?;
            let scene = harness::run_generate(&config, &out)?;
            println!(
                "wrote {}x{}x{} scene to {} (SNR {:.3} dB)",
                scene.cube.rows(),
                scene.cube.cols(),
                scene.cube.bands(),
                out.display(),
                scene.achieved_snr_db
            );
        }
        Command::Unmix {
            cube,
            endmembers,
            variant,
            common,
            preset,
            out,
        } => {
            let config: SolverConfig = harness::read_config(common.config.as_deref())?;
            config.validate()?;
            let seed = common.seed.unwrap_or(config.seed);
            let x = load_input(&cube, preset.as_deref())?;
            let res = harness::run_unmix(&x, endmembers, variant, &config, seed, &out)?;
            println!(
                "{variant}: {} iterations, objective {:e}, written to {}",
                res.diagnostics.iterations,
                res.diagnostics.final_objective,
                out.display()
            );
        }
        Command::Label {
            cube,
            seeds,
            common,
            preset,
            out,
        } => {
            let mut config: LabelConfig = harness::read_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                config.criteria.seed = s;
            }
            config.abundance_method()?;
            let x = load_input(&cube, preset.as_deref())?;
            let seeds = io::load_seeds(&seeds)?;
            let outcome = harness::run_label(&x, &seeds, &config, &out)?;
            println!(
                "rounds {}, rank correlation {:.4}, reconstruction RMSE {:.6}",
                outcome.rounds, outcome.report.rank_correlation, outcome.report.reconstruction_rmse
            );
            if !outcome.verified {
                return Err(Failure::Runtime(UnmixError::InvalidData(format!(
                    "labelling not verified after {} rounds; best attempt written to {}",
                    outcome.rounds,
                    out.display()
                ))));
            }
        }
        Command::Evaluate { gt, estimate, out } => {
            let truth = io::load_ground_truth(&gt)?;
            let (m, a) = harness::load_estimate(&estimate)?;
            let report = evaluate(&truth, (&m, &a))?;
            let text = harness::render_evaluation(
                &report,
                &provenance("evaluate", &[("gt", &gt), ("estimate", &estimate)]),
            );
            match out {
                Some(path) => io::write_text(&path, &text)?,
                None => print!("{text}"),
            }
        }
        Command::Bench {
            cube,
            gt,
            variant,
            reps,
            grid,
            common,
            preset,
            out,
            runs,
        } => {
            let mut config: BenchConfig = harness::read_config(common.config.as_deref())?;
            if !variant.is_empty() {
                config.variants = variant;
            }
            if let Some(r) = reps {
                config.repetitions = r;
            }
            if let Some(g) = grid {
                config.grid = GridSpec::parse(&g)?;
            }
            if let Some(s) = common.seed {
                config.seed = s;
            }
            config.validate()?;
            let x = load_input(&cube, preset.as_deref())?;
            let truth = load_gt(&gt, preset.as_deref())?;
            let result = harness::bench(&x, &truth, &config)?;
            let mut inputs = vec![("cube", cube.as_path()), ("gt", gt.as_path())];
            let preset_path = preset.as_ref().map(PathBuf::from);
            if let Some(p) = &preset_path {
                inputs.push(("preset", p.as_path()));
            }
            let text = harness::render_report(&result, &config, &provenance("bench", &inputs))?;
            io::write_text(&out, &text)?;
            if runs {
                let mut name = out.as_os_str().to_owned();
                name.push(".runs.csv");
                io::write_text(PathBuf::from(name), &harness::render_runs(&result))?;
            }
            let failed: usize = result.methods.iter().map(|m| m.failures.len()).sum();
            println!("report written to {} ({failed} failed runs)", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
