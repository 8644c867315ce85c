//! Synthetic scenes with known endmembers and abundances.
//!
//! A `z^2 x z^2` image is split into `z x z` square regions, each filled
//! with one ground cover. The one-hot maps are smoothed by a `(z+1) x (z+1)`
//! box filter, near-pure pixels are replaced by an even two-endmember mix,
//! and Gaussian noise at a target SNR is added to `M A`.

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UnmixError};
use crate::model::{AbundanceMatrix, EndmemberMatrix, HyperCube};

/// Size of the built-in library.
pub const LIBRARY_SIZE: usize = 15;
/// Largest abundance a generated pixel may keep.
pub const PURITY_CAP: f64 = 0.8;
const MIN_LIBRARY_SAD: f64 = 0.1;
const MAX_RESAMPLES: usize = 100;
const MAX_LABEL_DRAWS: usize = 1000;

const STREAM_LIBRARY: u64 = 1;
const STREAM_LABELS: u64 = 2;
const STREAM_NOISE: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    #[default]
    Gaussian,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub z: usize,
    pub k: usize,
    pub bands: usize,
    /// Target SNR in dB; `inf` for a noise-free scene.
    pub snr_db: f64,
    pub seed: u64,
    pub filter_passes: usize,
    pub noise: NoiseKind,
    /// Set negative noisy entries to zero.
    pub clamp: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            z: 8,
            k: 5,
            bands: 480,
            snr_db: f64::INFINITY,
            seed: 0,
            filter_passes: 1,
            noise: NoiseKind::Gaussian,
            clamp: false,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(UnmixError::InvalidParameter(msg));
        if self.z < 2 {
            return bad(format!("z must be at least 2, got {}", self.z));
        }
        if !(2..=LIBRARY_SIZE).contains(&self.k) {
            return bad(format!("K must lie in [2, {LIBRARY_SIZE}], got {}", self.k));
        }
        if self.k > self.z * self.z {
            return bad(format!("K = {} exceeds the {} regions", self.k, self.z * self.z));
        }
        if self.bands < 16 {
            return bad(format!("at least 16 bands are needed, got {}", self.bands));
        }
        if !(self.snr_db > 0.0) {
            return bad(format!("SNR must be positive or inf, got {}", self.snr_db));
        }
        if self.filter_passes == 0 {
            return bad("filter_passes must be at least 1".into());
        }
        Ok(())
    }

    pub fn side(&self) -> usize {
        self.z * self.z
    }

    pub fn pixels(&self) -> usize {
        self.side() * self.side()
    }

    pub fn window(&self) -> usize {
        self.z + 1
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub cube: HyperCube,
    pub endmembers: EndmemberMatrix,
    pub abundances: AbundanceMatrix,
    /// Noise power per pixel, `||N||_F^2 / N`.
    pub noise_power: f64,
    pub achieved_snr_db: f64,
    pub config: SceneConfig,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn spectral_angle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos()
}

fn smooth_spectrum(rng: &mut ChaCha8Rng, bands: usize) -> Vec<f64> {
    let l = bands as f64;
    let baseline = rng.random_range(0.05..0.2);
    let bumps = rng.random_range(4..=8);
    let params: Vec<(f64, f64, f64)> = (0..bumps)
        .map(|_| {
            (
                rng.random_range(0.0..l),
                rng.random_range(l / 40.0..l / 6.0),
                rng.random_range(0.2..1.0),
            )
        })
        .collect();
    let raw: Vec<f64> = (0..bands)
        .map(|i| {
            let t = i as f64;
            baseline
                + params
                    .iter()
                    .map(|(c, w, a)| a * (-(t - c).powi(2) / (2.0 * w * w)).exp())
                    .sum::<f64>()
        })
        .collect();
    let peak = raw.iter().cloned().fold(0.0, f64::max);
    raw.into_iter().map(|v| v / peak).collect()
}

/// Procedural library of `count` smooth, strictly positive spectra with
/// pairwise spectral angles of at least 0.1 rad. The first `count` spectra
/// of the full 15-spectrum library are returned, so smaller libraries are
/// prefixes of larger ones.
pub fn generate_library(count: usize, bands: usize, seed: u64) -> Result<EndmemberMatrix> {
    if count == 0 || count > LIBRARY_SIZE {
        return Err(UnmixError::InvalidParameter(format!(
            "library size must lie in [1, {LIBRARY_SIZE}], got {count}"
        )));
    }
    if bands < 16 {
        return Err(UnmixError::InvalidParameter(format!(
            "at least 16 bands are needed, got {bands}"
        )));
    }
    let mut rng = stream(seed, STREAM_LIBRARY);
    let mut spectra: Vec<Vec<f64>> = Vec::with_capacity(LIBRARY_SIZE);
    while spectra.len() < LIBRARY_SIZE {
        let mut accepted = None;
        for _ in 0..MAX_RESAMPLES {
            let s = smooth_spectrum(&mut rng, bands);
            if spectra.iter().all(|p| spectral_angle(p, &s) >= MIN_LIBRARY_SAD) {
                accepted = Some(s);
                break;
            }
        }
        match accepted {
            Some(s) => spectra.push(s),
            None => {
                return Err(UnmixError::Generation(format!(
                    "spectrum {} not separated by {MIN_LIBRARY_SAD} rad after {MAX_RESAMPLES} draws",
                    spectra.len() + 1
                )))
            }
        }
    }
    let data = DMatrix::from_fn(bands, count, |l, k| spectra[k][l]);
    let names = (1..=count).map(|k| format!("lib{k:02}")).collect();
    EndmemberMatrix::with_names(data, names)
}

/// Region cover labels for the `z x z` regions in row-major order; every
/// one of the `K` covers appears at least once.
pub fn region_labels(z: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    let regions = z * z;
    if k < 1 || k > regions {
        return Err(UnmixError::InvalidParameter(format!(
            "{k} covers for {regions} regions"
        )));
    }
    let mut rng = stream(seed, STREAM_LABELS);
    for _ in 0..MAX_LABEL_DRAWS {
        let labels: Vec<usize> = (0..regions).map(|_| rng.random_range(0..k)).collect();
        let mut seen = vec![false; k];
        labels.iter().for_each(|&c| seen[c] = true);
        if seen.iter().all(|&s| s) {
            return Ok(labels);
        }
    }
    warn!("uniform cover draws kept missing a cover; seeding one region per cover");
    let mut labels: Vec<usize> = (0..regions)
        .map(|r| if r < k { r } else { rng.random_range(0..k) })
        .collect();
    for i in (1..regions).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    Ok(labels)
}

/// Mirror index with edge repetition, as in `symmetric` boundary padding.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Box filter of width `w` over a `side x side` image stored row-major,
/// with symmetric padding. Offsets run from `-(w-1)/2` to `w/2`.
pub fn box_filter(image: &[f64], side: usize, w: usize) -> Vec<f64> {
    let lo = -(((w - 1) / 2) as isize);
    let hi = lo + w as isize;
    let inv = 1.0 / w as f64;
    let mut rows = vec![0.0; image.len()];
    for r in 0..side {
        for c in 0..side {
            let mut s = 0.0;
            for d in lo..hi {
                s += image[r * side + reflect(c as isize + d, side)];
            }
            rows[r * side + c] = s * inv;
        }
    }
    let mut out = vec![0.0; image.len()];
    for r in 0..side {
        for c in 0..side {
            let mut s = 0.0;
            for d in lo..hi {
                s += rows[reflect(r as isize + d, side) * side + c];
            }
            out[r * side + c] = s * inv;
        }
    }
    out
}

/// Replaces a column whose largest entry exceeds the cap by 0.5/0.5 on its
/// two largest entries (lowest index first among ties).
fn cap_purity(col: &mut [f64]) {
    let mut order: Vec<usize> = (0..col.len()).collect();
    order.sort_by(|&i, &j| col[j].total_cmp(&col[i]).then(i.cmp(&j)));
    if col[order[0]] > PURITY_CAP {
        col.iter_mut().for_each(|v| *v = 0.0);
        col[order[0]] = 0.5;
        col[order[1]] = 0.5;
    }
}

/// Abundances on the `z^2 x z^2` grid together with the region labels they
/// were built from. Pixel `n` is grid position `(n / z^2, n % z^2)`.
pub fn generate_abundances_with_labels(
    z: usize,
    k: usize,
    seed: u64,
    filter_passes: usize,
) -> Result<(AbundanceMatrix, Vec<usize>)> {
    if z < 2 {
        return Err(UnmixError::InvalidParameter(format!("z must be at least 2, got {z}")));
    }
    if k < 2 {
        return Err(UnmixError::InvalidParameter(format!("K must be at least 2, got {k}")));
    }
    if k > z * z {
        return Err(UnmixError::InvalidParameter(format!(
            "K = {k} exceeds the {} regions",
            z * z
        )));
    }
    if filter_passes == 0 {
        return Err(UnmixError::InvalidParameter("filter_passes must be at least 1".into()));
    }
    let labels = region_labels(z, k, seed)?;
    let side = z * z;
    let n = side * side;
    let mut a = DMatrix::zeros(k, n);
    for r in 0..side {
        for c in 0..side {
            let region = (r / z) * z + c / z;
            a[(labels[region], r * side + c)] = 1.0;
        }
    }
    for _ in 0..filter_passes {
        for e in 0..k {
            let plane: Vec<f64> = a.row(e).iter().copied().collect();
            let smoothed = box_filter(&plane, side, z + 1);
            a.row_mut(e).copy_from_slice(&smoothed);
        }
    }
    for mut col in a.column_iter_mut() {
        cap_purity(col.as_mut_slice());
    }
    Ok((AbundanceMatrix::new(a)?, labels))
}

pub fn generate_abundances(z: usize, k: usize, seed: u64, filter_passes: usize) -> Result<AbundanceMatrix> {
    Ok(generate_abundances_with_labels(z, k, seed, filter_passes)?.0)
}

/// `10 log10(||signal||^2 / ||noise||^2)`.
pub fn snr_db(signal: &DMatrix<f64>, noise: &DMatrix<f64>) -> f64 {
    let p = noise.norm_squared();
    if p == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (signal.norm_squared() / p).log10()
}

/// Adds zero-mean noise with per-entry variance
/// `(||Y||^2 / N) / (L 10^(snr/10))`. Returns the noisy matrix and the SNR
/// measured on the drawn noise.
pub fn add_noise(y: &DMatrix<f64>, snr: f64, seed: u64, kind: NoiseKind) -> Result<(DMatrix<f64>, f64)> {
    if !(snr > 0.0) {
        return Err(UnmixError::InvalidParameter(format!(
            "SNR must be positive or inf, got {snr}"
        )));
    }
    if snr.is_infinite() {
        return Ok((y.clone(), f64::INFINITY));
    }
    let (l, n) = y.shape();
    let signal = y.norm_squared() / n as f64;
    let variance = signal / (l as f64 * 10f64.powf(snr / 10.0));
    let sd = variance.sqrt();
    let mut rng = stream(seed, STREAM_NOISE);
    let noise = match kind {
        NoiseKind::Gaussian => {
            let dist = Normal::new(0.0, sd).map_err(|e| UnmixError::InvalidParameter(e.to_string()))?;
            DMatrix::from_fn(l, n, |_, _| dist.sample(&mut rng))
        }
        NoiseKind::Uniform => {
            let half = sd * 3f64.sqrt();
            let dist = Uniform::new(-half, half).map_err(|e| UnmixError::InvalidParameter(e.to_string()))?;
            DMatrix::from_fn(l, n, |_, _| dist.sample(&mut rng))
        }
    };
    let achieved = snr_db(y, &noise);
    Ok((y + noise, achieved))
}

fn wavelengths(bands: usize) -> Vec<f64> {
    let step = (2500.0 - 400.0) / (bands - 1) as f64;
    (0..bands).map(|i| 400.0 + step * i as f64).collect()
}

pub fn generate_scene(config: &SceneConfig) -> Result<SyntheticScene> {
    config.validate()?;
    let library = generate_library(LIBRARY_SIZE, config.bands, config.seed)?;
    generate_scene_from_library(config, &library)
}

/// Scene built from the first `K` spectra of a caller-supplied library.
pub fn generate_scene_from_library(config: &SceneConfig, library: &EndmemberMatrix) -> Result<SyntheticScene> {
    config.validate()?;
    if library.count() < config.k {
        return Err(UnmixError::InvalidParameter(format!(
            "library holds {} spectra, {} requested",
            library.count(),
            config.k
        )));
    }
    let bands = library.bands();
    let m = library.data().columns(0, config.k).into_owned();
    let names = library.names()[..config.k].to_vec();
    let endmembers = EndmemberMatrix::with_names(m, names)?;
    let abundances = generate_abundances(config.z, config.k, config.seed, config.filter_passes)?;
    let clean = endmembers.data() * abundances.data();
    let (mut x, achieved) = add_noise(&clean, config.snr_db, config.seed, config.noise)?;
    let noise_power = (&x - &clean).norm_squared() / x.ncols() as f64;
    if config.clamp {
        x.apply(|v| *v = v.max(0.0));
    }
    info!(
        "synthetic scene: {} pixels, {bands} bands, SNR {achieved:.3} dB",
        x.ncols()
    );
    let side = config.side();
    let cube = HyperCube::new_signed(x, side, side, (1..=bands).collect(), Some(wavelengths(bands)))?;
    Ok(SyntheticScene {
        cube,
        endmembers,
        abundances,
        noise_power,
        achieved_snr_db: achieved,
        config: config.clone(),
    })
}

/// Spectral angle between every pair of columns.
pub fn pairwise_sad(m: &DMatrix<f64>) -> DMatrix<f64> {
    let k = m.ncols();
    let cols: Vec<DVector<f64>> = m.column_iter().map(|c| c.into_owned()).collect();
    DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            0.0
        } else {
            spectral_angle(cols[i].as_slice(), cols[j].as_slice())
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_range_separation_and_determinism() {
        let lib = generate_library(15, 64, 4).unwrap();
        assert!(lib.data().iter().all(|&v| v > 0.0 && v <= 1.0));
        let sad = pairwise_sad(lib.data());
        for i in 0..15 {
            assert_eq!(sad[(i, i)], 0.0);
            for j in 0..15 {
                if i != j {
                    assert!(sad[(i, j)] >= 0.1);
                }
            }
        }
        assert_eq!(lib, generate_library(15, 64, 4).unwrap());
        let prefix = generate_library(5, 64, 4).unwrap();
        assert_eq!(prefix.data(), &lib.data().columns(0, 5).into_owned());
        assert!(generate_library(16, 64, 0).is_err());
        assert!(generate_library(3, 15, 0).is_err());
    }

    #[test]
    fn symmetric_reflection() {
        assert_eq!(reflect(-1, 4), 0);
        assert_eq!(reflect(-2, 4), 1);
        assert_eq!(reflect(4, 4), 3);
        assert_eq!(reflect(5, 4), 2);
        assert_eq!(reflect(2, 4), 2);
    }

    #[test]
    fn box_filter_keeps_constants_and_mass_on_average() {
        let img = vec![0.3; 16];
        assert!(box_filter(&img, 4, 3).iter().all(|v| (v - 0.3).abs() < 1e-15));
        let even = box_filter(&img, 4, 4);
        assert!(even.iter().all(|v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn every_cover_appears() {
        for seed in 0..20 {
            let labels = region_labels(2, 4, seed).unwrap();
            let mut sorted = labels.clone();
            sorted.sort();
            assert_eq!(sorted, vec![0, 1, 2, 3]);
        }
        let labels = region_labels(4, 15, 1).unwrap();
        for c in 0..15 {
            assert!(labels.contains(&c));
        }
    }

    #[test]
    fn purity_cap_replaces_with_top_two() {
        let mut col = vec![0.05, 0.85, 0.1];
        cap_purity(&mut col);
        assert_eq!(col, vec![0.0, 0.5, 0.5]);
        let mut pure = vec![0.0, 0.0, 1.0];
        cap_purity(&mut pure);
        assert_eq!(pure, vec![0.5, 0.0, 0.5]);
        let mut mixed = vec![0.4, 0.6];
        cap_purity(&mut mixed);
        assert_eq!(mixed, vec![0.4, 0.6]);
    }

    #[test]
    fn infinite_snr_is_identity() {
        let y = DMatrix::from_fn(3, 4, |i, j| (i + j) as f64);
        let (x, snr) = add_noise(&y, f64::INFINITY, 1, NoiseKind::Gaussian).unwrap();
        assert_eq!(x, y);
        assert!(snr.is_infinite());
        assert!(add_noise(&y, 0.0, 1, NoiseKind::Gaussian).is_err());
    }

    #[test]
    fn uniform_noise_hits_target() {
        let y = DMatrix::from_fn(100, 1000, |i, j| 0.1 + ((i * 7 + j * 3) % 11) as f64 / 11.0);
        let (x, achieved) = add_noise(&y, 25.0, 3, NoiseKind::Uniform).unwrap();
        assert!((achieved - 25.0).abs() < 0.1);
        assert!((snr_db(&y, &(&x - &y)) - achieved).abs() < 1e-9);
    }

    #[test]
    fn config_validation_and_toml() {
        assert!(SceneConfig::default().validate().is_ok());
        for bad in [
            SceneConfig {
                z: 1,
                ..SceneConfig::default()
            },
            SceneConfig {
                k: 1,
                ..SceneConfig::default()
            },
            SceneConfig {
                k: 16,
                ..SceneConfig::default()
            },
            SceneConfig {
                z: 2,
                k: 5,
                ..SceneConfig::default()
            },
            SceneConfig {
                snr_db: -3.0,
                ..SceneConfig::default()
            },
            SceneConfig {
                filter_passes: 0,
                ..SceneConfig::default()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        let parsed: SceneConfig = toml::from_str("z = 4\nsnr_db = inf\nnoise = \"uniform\"\n").unwrap();
        assert_eq!(parsed.z, 4);
        assert!(parsed.snr_db.is_infinite());
        assert_eq!(parsed.noise, NoiseKind::Uniform);
        let text = toml::to_string(&parsed).unwrap();
        assert_eq!(toml::from_str::<SceneConfig>(&text).unwrap(), parsed);
    }
}
