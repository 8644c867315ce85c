use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use unmix_core::initializers::init_pair;
use unmix_core::io;
use unmix_core::labeling::GroundTruth;

fn unmix(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unmix"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn small_scene(dir: &Path, snr: &str) {
    fs::write(
        dir.join("scene.toml"),
        format!("z = 3\nk = 3\nbands = 40\nsnr_db = {snr}\nseed = 5\n"),
    )
    .unwrap();
    let out = unmix(&["generate", "--config", "scene.toml", "--out", "sc"], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    small_scene(dir.path(), "30.0");
    let first = fs::read(dir.path().join("sc/cube.bin")).unwrap();
    let out = unmix(&["generate", "--config", "scene.toml", "--out", "again"], dir.path());
    assert_eq!(code(&out), 0);
    assert_eq!(first, fs::read(dir.path().join("again/cube.bin")).unwrap());
    assert_eq!(
        fs::read(dir.path().join("sc/gt_A.bin")).unwrap(),
        fs::read(dir.path().join("again/gt_A.bin")).unwrap()
    );
    let cube = io::load_cube(dir.path().join("sc/cube")).unwrap();
    assert_eq!((cube.rows(), cube.cols(), cube.bands()), (9, 9, 40));
}

#[test]
fn noise_free_scene_is_the_mixing_product() {
    let dir = tempfile::tempdir().unwrap();
    small_scene(dir.path(), "inf");
    let cube = io::load_cube(dir.path().join("sc/cube")).unwrap();
    let gt = io::load_ground_truth(dir.path().join("sc/gt")).unwrap();
    let product = gt.endmembers.data() * gt.abundances.data();
    assert!((cube.data() - product).amax() < 1e-15);
}

#[test]
fn zero_iterations_emit_the_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    small_scene(dir.path(), "30.0");
    fs::write(dir.path().join("solver.toml"), "max_iters = 0\n").unwrap();
    let out = unmix(
        &[
            "unmix",
            "sc/cube",
            "-k",
            "3",
            "--config",
            "solver.toml",
            "--seed",
            "4",
            "--out",
            "est",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let cube = io::load_cube(dir.path().join("sc/cube")).unwrap();
    let (m0, a0) = init_pair(&cube, 3, 4).unwrap();
    let m = io::load_endmembers(dir.path().join("est/endmembers")).unwrap();
    let a = io::load_abundances(dir.path().join("est/abundances")).unwrap();
    assert_eq!(m.data(), m0.data());
    assert_eq!(a.data(), a0.data());
}

#[test]
fn nmf_history_file_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    small_scene(dir.path(), "30.0");
    let out = unmix(&["unmix", "sc/cube", "-k", "3", "--out", "est"], dir.path());
    assert_eq!(code(&out), 0);
    let text = fs::read_to_string(dir.path().join("est/history.txt")).unwrap();
    let h: Vec<f64> = text.lines().map(|l| l.parse().unwrap()).collect();
    assert!(h.len() > 1);
    assert!(h.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    let run = fs::read_to_string(dir.path().join("est/run.toml")).unwrap();
    assert!(run.contains("variant = \"nmf\""));
}

#[test]
fn usage_and_runtime_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    small_scene(dir.path(), "30.0");
    let bad_variant = unmix(
        &["unmix", "sc/cube", "-k", "3", "--variant", "bogus", "--out", "e"],
        dir.path(),
    );
    assert_eq!(code(&bad_variant), 1);
    let no_args = unmix(&[], dir.path());
    assert_eq!(code(&no_args), 1);
    fs::write(dir.path().join("broken.toml"), "max_iters = \"many\"\n").unwrap();
    let bad_config = unmix(
        &["unmix", "sc/cube", "-k", "3", "--config", "broken.toml", "--out", "e"],
        dir.path(),
    );
    assert_eq!(code(&bad_config), 1);
    let bad_preset = unmix(
        &["unmix", "sc/cube", "-k", "3", "--preset", "nowhere", "--out", "e"],
        dir.path(),
    );
    assert_eq!(code(&bad_preset), 1);
    let wrong_preset = unmix(
        &["unmix", "sc/cube", "-k", "3", "--preset", "jasper", "--out", "e"],
        dir.path(),
    );
    assert_eq!(code(&wrong_preset), 2);
    let missing = unmix(&["unmix", "absent", "-k", "3", "--out", "e"], dir.path());
    assert_eq!(code(&missing), 2);
    let help = unmix(&["--help"], dir.path());
    assert_eq!(code(&help), 0);
}

#[test]
fn evaluate_ground_truth_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    small_scene(dir.path(), "30.0");
    let gt = io::load_ground_truth(dir.path().join("sc/gt")).unwrap();
    io::save_endmembers(&gt.endmembers, dir.path().join("same/endmembers")).unwrap();
    io::save_abundances(&gt.abundances, None, dir.path().join("same/abundances")).unwrap();
    let out = unmix(&["evaluate", "--gt", "sc/gt", "--estimate", "same"], dir.path());
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let avg = text.lines().find(|l| l.starts_with("Avg.")).unwrap();
    assert_eq!(avg, "Avg.,0.000000,0.000000");
}

fn table_rows<'a>(text: &'a str, table: &str) -> Vec<Vec<&'a str>> {
    let mut rows = Vec::new();
    let mut inside = false;
    for line in text.lines() {
        if line.starts_with("# table:") {
            inside = line.ends_with(table);
            continue;
        }
        if inside && !line.starts_with('#') {
            rows.push(line.split(',').collect());
        }
    }
    rows
}

#[test]
fn bench_replays_byte_for_byte_and_means_match_runs() {
    let dir = tempfile::tempdir().unwrap();
    small_scene(dir.path(), "30.0");
    fs::write(dir.path().join("bench.toml"), "[solver]\nmax_iters = 60\n").unwrap();
    let args = |out: &'static str| {
        vec![
            "bench",
            "sc/cube",
            "--gt",
            "sc/gt",
            "--variant",
            "nmf,l1",
            "--reps",
            "3",
            "--seed",
            "7",
            "--grid",
            "lambda=0.01,0.1;fine=3",
            "--config",
            "bench.toml",
            "--runs",
            "--out",
            out,
        ]
    };
    assert_eq!(code(&unmix(&args("a.csv"), dir.path())), 0);
    assert_eq!(code(&unmix(&args("b.csv"), dir.path())), 0);
    let a = fs::read_to_string(dir.path().join("a.csv")).unwrap();
    let b = fs::read_to_string(dir.path().join("b.csv")).unwrap();
    let strip = |s: &str| {
        s.lines()
            .filter(|l| !l.starts_with("# cube") && !l.starts_with("# gt"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip(&a), strip(&b));
    assert!(a.contains("# config: seed = 7"));
    assert!(a.contains("# search: l1"));

    // per-endmember means recomputed from the per-run file
    let runs = fs::read_to_string(dir.path().join("a.csv.runs.csv")).unwrap();
    let sad = table_rows(&a, "sad");
    let header = &sad[0];
    for row in &sad[1..sad.len() - 1] {
        for (col, method) in header.iter().enumerate().skip(1) {
            let vals: Vec<f64> = runs
                .lines()
                .skip(1)
                .map(|l| l.split(',').collect::<Vec<_>>())
                .filter(|f| f[0] == *method && f[2] == row[0])
                .map(|f| f[3].parse().unwrap())
                .collect();
            assert_eq!(vals.len(), 3);
            let mean = vals.iter().sum::<f64>() / 3.0;
            let reported: f64 = row[col].parse().unwrap();
            assert!(
                (mean - reported).abs() < 2e-6,
                "{method} {}: {mean} vs {reported}",
                row[0]
            );
        }
    }
}

#[test]
fn single_point_grid_skips_search() {
    let dir = tempfile::tempdir().unwrap();
    small_scene(dir.path(), "30.0");
    let out = unmix(
        &[
            "bench",
            "sc/cube",
            "--gt",
            "sc/gt",
            "--variant",
            "l12",
            "--reps",
            "1",
            "--grid",
            "lambda=0.1",
            "--out",
            "r.csv",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let text = fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert!(!text.contains("# search:"));
    assert!(text.contains("# method: l12 lambda=1e-1"));
}

fn write_seeds(dir: &Path, gt: &GroundTruth) {
    let a = gt.abundances.data();
    let mut text = String::new();
    for k in 0..a.nrows() {
        let best = (0..a.ncols()).max_by(|&i, &j| a[(k, i)].total_cmp(&a[(k, j)])).unwrap();
        text.push_str(&format!("[[endmember]]\nname = \"em{k}\"\npixels = [{best}]\n\n"));
    }
    fs::write(dir.join("seeds.toml"), text).unwrap();
}

#[test]
fn label_succeeds_or_reports_exhaustion() {
    let dir = tempfile::tempdir().unwrap();
    small_scene(dir.path(), "40.0");
    let gt = io::load_ground_truth(dir.path().join("sc/gt")).unwrap();
    write_seeds(dir.path(), &gt);

    fs::write(
        dir.path().join("easy.toml"),
        "[criteria]\nmin_rank_correlation = -1.0\n",
    )
    .unwrap();
    let out = unmix(
        &[
            "label",
            "sc/cube",
            "--seeds",
            "seeds.toml",
            "--config",
            "easy.toml",
            "--out",
            "ok",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("rounds 1,"));
    assert!(io::load_ground_truth(dir.path().join("ok/gt")).is_ok());

    fs::write(
        dir.path().join("hard.toml"),
        "[criteria]\nmin_rank_correlation = 1.5\nmax_rounds = 2\n",
    )
    .unwrap();
    let out = unmix(
        &[
            "label",
            "sc/cube",
            "--seeds",
            "seeds.toml",
            "--config",
            "hard.toml",
            "--out",
            "no",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 2);
    let record = fs::read_to_string(dir.path().join("no/verification.toml")).unwrap();
    assert!(record.contains("verified = false"));
    assert!(record.contains("rounds = 2"));
}
