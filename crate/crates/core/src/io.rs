//! Cube and ground-truth files, band-removal presets, label grids and seed
//! files.
//!
//! A cube at stem `p` is the pair `p.hdr` (TOML header) and `p.bin`
//! (band-sequential little-endian floats: all pixels of band 1, then band
//! 2, ...). A ground truth at stem `p` is two such files, `p_M` holding the
//! `L x K` endmembers and `p_A` the `K x N` abundances.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UnmixError};
use crate::labeling::{ClassLabelMap, EndmemberSeeds, GroundTruth};
use crate::model::{AbundanceMatrix, EndmemberMatrix, HyperCube, SIMPLEX_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeHeader {
    pub rows: usize,
    pub cols: usize,
    pub pixels: usize,
    pub bands: usize,
    pub dtype: String,
    pub byte_order: String,
    pub interleave: String,
    pub band_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wavelengths: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

fn with_extension(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Strips a trailing `.hdr` or `.bin` so either file names the cube.
pub fn cube_stem(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("hdr") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn suffixed(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| UnmixError::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| UnmixError::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| UnmixError::io(path, e))
}

fn encode(data: &DMatrix<f64>, dtype: Dtype) -> Vec<u8> {
    let (l, n) = data.shape();
    let mut out = Vec::with_capacity(l * n * dtype.width());
    for b in 0..l {
        for p in 0..n {
            let v = data[(b, p)];
            match dtype {
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    out
}

fn decode(bytes: &[u8], l: usize, n: usize, dtype: Dtype) -> DMatrix<f64> {
    let w = dtype.width();
    DMatrix::from_fn(l, n, |b, p| {
        let at = (b * n + p) * w;
        match dtype {
            Dtype::F32 => f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as f64,
            Dtype::F64 => f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes")),
        }
    })
}

/// Narrowest dtype that stores every value exactly.
pub fn lossless_dtype(data: &DMatrix<f64>) -> Dtype {
    if data.iter().all(|&v| (v as f32) as f64 == v) {
        Dtype::F32
    } else {
        Dtype::F64
    }
}

struct RawCube {
    header: CubeHeader,
    data: DMatrix<f64>,
}

fn write_raw(stem: &Path, header: &CubeHeader, data: &DMatrix<f64>, dtype: Dtype) -> Result<()> {
    let text = toml::to_string(header).map_err(|e| UnmixError::Parse(e.to_string()))?;
    write_file(&with_extension(stem, "hdr"), text.as_bytes())?;
    write_file(&with_extension(stem, "bin"), &encode(data, dtype))
}

pub fn parse_header(text: &str) -> Result<(CubeHeader, Dtype)> {
    let header: CubeHeader = toml::from_str(text).map_err(|e| UnmixError::Parse(format!("cube header: {e}")))?;
    if header.byte_order != "little" {
        return Err(UnmixError::Unsupported(format!("byte order `{}`", header.byte_order)));
    }
    let dtype = match header.dtype.as_str() {
        "f32" => Dtype::F32,
        "f64" => Dtype::F64,
        other => return Err(UnmixError::Unsupported(format!("dtype `{other}`"))),
    };
    if header.interleave != "band-sequential" {
        return Err(UnmixError::Unsupported(format!("interleave `{}`", header.interleave)));
    }
    if header.rows * header.cols != header.pixels {
        return Err(UnmixError::Parse(format!(
            "grid {}x{} does not match {} pixels",
            header.rows, header.cols, header.pixels
        )));
    }
    if header.band_ids.len() != header.bands {
        return Err(UnmixError::Parse(format!(
            "{} band ids for {} bands",
            header.band_ids.len(),
            header.bands
        )));
    }
    Ok((header, dtype))
}

fn read_raw(stem: &Path) -> Result<RawCube> {
    let hdr_path = with_extension(stem, "hdr");
    let text = String::from_utf8(read_file(&hdr_path)?)
        .map_err(|_| UnmixError::Parse(format!("{} is not UTF-8", hdr_path.display())))?;
    let (header, dtype) = parse_header(&text)?;
    let bin_path = with_extension(stem, "bin");
    let bytes = read_file(&bin_path)?;
    let expected = header.bands * header.pixels * dtype.width();
    if bytes.len() != expected {
        return Err(UnmixError::InvalidData(format!(
            "{} holds {} bytes, header implies {expected}",
            bin_path.display(),
            bytes.len()
        )));
    }
    let data = decode(&bytes, header.bands, header.pixels, dtype);
    Ok(RawCube { header, data })
}

fn cube_header(cube: &HyperCube, dtype: Dtype) -> CubeHeader {
    CubeHeader {
        rows: cube.rows(),
        cols: cube.cols(),
        pixels: cube.pixels(),
        bands: cube.bands(),
        dtype: match dtype {
            Dtype::F32 => "f32".into(),
            Dtype::F64 => "f64".into(),
        },
        byte_order: "little".into(),
        interleave: "band-sequential".into(),
        band_ids: cube.band_ids().to_vec(),
        wavelengths: cube.wavelengths().map(<[f64]>::to_vec),
        names: None,
        notes: Vec::new(),
    }
}

/// Writes the cube losslessly: `f32` when every value is an exact `f32`,
/// `f64` otherwise.
pub fn save_cube(cube: &HyperCube, path: impl AsRef<Path>) -> Result<()> {
    save_cube_as(cube, path, lossless_dtype(cube.data()))
}

pub fn save_cube_as(cube: &HyperCube, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    let stem = cube_stem(path.as_ref());
    write_raw(&stem, &cube_header(cube, dtype), cube.data(), dtype)
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<HyperCube> {
    let raw = read_raw(&cube_stem(path.as_ref()))?;
    let h = raw.header;
    HyperCube::new_signed(raw.data, h.rows, h.cols, h.band_ids, h.wavelengths)
}

fn matrix_header(
    data: &DMatrix<f64>,
    rows: usize,
    cols: usize,
    names: Option<Vec<String>>,
    notes: Vec<String>,
) -> CubeHeader {
    CubeHeader {
        rows,
        cols,
        pixels: data.ncols(),
        bands: data.nrows(),
        dtype: "f64".into(),
        byte_order: "little".into(),
        interleave: "band-sequential".into(),
        band_ids: (1..=data.nrows()).collect(),
        wavelengths: None,
        names,
        notes,
    }
}

pub fn save_endmembers(m: &EndmemberMatrix, path: impl AsRef<Path>) -> Result<()> {
    let stem = cube_stem(path.as_ref());
    let header = matrix_header(m.data(), 1, m.count(), Some(m.names().to_vec()), Vec::new());
    write_raw(&stem, &header, m.data(), Dtype::F64)
}

pub fn load_endmembers(path: impl AsRef<Path>) -> Result<EndmemberMatrix> {
    let raw = read_raw(&cube_stem(path.as_ref()))?;
    match raw.header.names {
        Some(names) => EndmemberMatrix::with_names(raw.data, names),
        None => EndmemberMatrix::new(raw.data),
    }
}

/// Abundances keep the image grid when one is given.
pub fn save_abundances(a: &AbundanceMatrix, grid: Option<(usize, usize)>, path: impl AsRef<Path>) -> Result<()> {
    let (rows, cols) = grid.unwrap_or((1, a.pixels()));
    if rows * cols != a.pixels() {
        return Err(UnmixError::Shape(format!(
            "grid {rows}x{cols} for {} pixels",
            a.pixels()
        )));
    }
    let stem = cube_stem(path.as_ref());
    write_raw(
        &stem,
        &matrix_header(a.data(), rows, cols, None, Vec::new()),
        a.data(),
        Dtype::F64,
    )
}

pub fn load_abundances(path: impl AsRef<Path>) -> Result<AbundanceMatrix> {
    AbundanceMatrix::new(read_raw(&cube_stem(path.as_ref()))?.data)
}

pub fn ground_truth_paths(stem: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let stem = cube_stem(stem.as_ref());
    (suffixed(&stem, "_M"), suffixed(&stem, "_A"))
}

/// Stores `M` and `A` as `f64` cube files `<stem>_M` and `<stem>_A`.
pub fn save_ground_truth(gt: &GroundTruth, grid: Option<(usize, usize)>, stem: impl AsRef<Path>) -> Result<()> {
    let (m_path, a_path) = ground_truth_paths(stem);
    let m = &gt.endmembers;
    let header = matrix_header(m.data(), 1, m.count(), Some(m.names().to_vec()), gt.notes.clone());
    write_raw(&m_path, &header, m.data(), Dtype::F64)?;
    save_abundances(&gt.abundances, grid, a_path)
}

/// Loads a ground truth; abundance columns off the simplex are accepted
/// with a note.
pub fn load_ground_truth(stem: impl AsRef<Path>) -> Result<GroundTruth> {
    let (m_path, a_path) = ground_truth_paths(stem);
    let raw_m = read_raw(&m_path)?;
    let notes = raw_m.header.notes.clone();
    let m = match raw_m.header.names {
        Some(names) => EndmemberMatrix::with_names(raw_m.data, names)?,
        None => EndmemberMatrix::new(raw_m.data)?,
    };
    let a = load_abundances(&a_path)?;
    if a.count() != m.count() {
        return Err(UnmixError::Shape(format!(
            "{} holds {} endmembers, {} holds {} abundance rows",
            m_path.display(),
            m.count(),
            a_path.display(),
            a.count()
        )));
    }
    let mut gt = GroundTruth::new(m, a)?;
    gt.notes = notes;
    let violation = gt.abundances.max_simplex_violation();
    if violation > SIMPLEX_TOL {
        let msg = format!("abundance columns deviate from unit sum by up to {violation:.3e}");
        warn!("{msg}");
        gt.notes.push(msg);
    }
    Ok(gt)
}

/// Bands removed from a sensor's original band list, as inclusive 1-based
/// ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandRemovalList {
    pub name: String,
    pub original_bands: usize,
    pub removed: Vec<(usize, usize)>,
}

const PRESETS: &[(&str, usize, &[(usize, usize)])] = &[
    ("samson", 156, &[]),
    ("jasper", 224, &[(1, 3), (108, 112), (154, 166), (220, 224)]),
    (
        "urban",
        210,
        &[(1, 4), (76, 76), (87, 87), (101, 111), (136, 153), (198, 210)],
    ),
    ("cuprite", 224, &[(1, 2), (104, 113), (148, 167), (221, 224)]),
    (
        "sandiego",
        224,
        &[(1, 6), (33, 35), (97, 97), (107, 113), (153, 166), (221, 224)],
    ),
    ("wdc", 210, &[(103, 106), (138, 148), (207, 210)]),
];

impl BandRemovalList {
    pub fn new(name: impl Into<String>, original_bands: usize, removed: Vec<(usize, usize)>) -> Result<Self> {
        let list = Self {
            name: name.into(),
            original_bands,
            removed,
        };
        list.validate()?;
        Ok(list)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let key = name.trim().to_ascii_lowercase();
        PRESETS
            .iter()
            .find(|(n, _, _)| *n == key)
            .map(|(n, total, ranges)| Self {
                name: n.to_string(),
                original_bands: *total,
                removed: ranges.to_vec(),
            })
            .ok_or_else(|| {
                let known: Vec<&str> = PRESETS.iter().map(|p| p.0).collect();
                UnmixError::InvalidParameter(format!("unknown band preset `{name}`; known: {}", known.join(", ")))
            })
    }

    pub fn preset_names() -> Vec<&'static str> {
        PRESETS.iter().map(|p| p.0).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut sorted = self.removed.clone();
        sorted.sort();
        for &(a, b) in &sorted {
            if a == 0 || a > b || b > self.original_bands {
                return Err(UnmixError::InvalidParameter(format!(
                    "band range {a}-{b} outside 1-{}",
                    self.original_bands
                )));
            }
        }
        if sorted.windows(2).any(|w| w[1].0 <= w[0].1) {
            return Err(UnmixError::InvalidParameter("band ranges overlap".into()));
        }
        Ok(())
    }

    /// 0-based positions of the kept bands.
    pub fn kept(&self) -> Vec<usize> {
        (1..=self.original_bands)
            .filter(|b| !self.removed.iter().any(|&(lo, hi)| (lo..=hi).contains(b)))
            .map(|b| b - 1)
            .collect()
    }

    pub fn remaining(&self) -> usize {
        self.kept().len()
    }
}

/// Drops the listed bands; `band_ids` keeps the survivors' original ids.
pub fn apply_band_removal(cube: &HyperCube, list: &BandRemovalList) -> Result<HyperCube> {
    list.validate()?;
    if cube.bands() != list.original_bands {
        return Err(UnmixError::Shape(format!(
            "preset `{}` expects {} bands, cube has {}",
            list.name,
            list.original_bands,
            cube.bands()
        )));
    }
    let kept = list.kept();
    let data = cube.data().select_rows(kept.iter());
    let ids = kept.iter().map(|&i| cube.band_ids()[i]).collect();
    let wl = cube.wavelengths().map(|w| kept.iter().map(|&i| w[i]).collect());
    HyperCube::new_signed(data, cube.rows(), cube.cols(), ids, wl)
}

/// Applies the same removal to endmember spectra recorded on the original
/// bands.
pub fn remove_endmember_bands(m: &EndmemberMatrix, list: &BandRemovalList) -> Result<EndmemberMatrix> {
    list.validate()?;
    if m.bands() != list.original_bands {
        return Err(UnmixError::Shape(format!(
            "preset `{}` expects {} bands, endmembers have {}",
            list.name,
            list.original_bands,
            m.bands()
        )));
    }
    let kept = list.kept();
    EndmemberMatrix::with_names(m.data().select_rows(kept.iter()), m.names().to_vec())
}

/// Whitespace-separated class indices, one image row per line.
pub fn parse_label_grid(text: &str) -> Result<(ClassLabelMap, usize, usize)> {
    let mut labels = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Vec<usize> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| UnmixError::Parse(format!("label grid line {}: `{t}` is not a class index", i + 1)))
            })
            .collect::<Result<_>>()?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(UnmixError::Parse(format!(
                    "label grid line {} has {} entries, expected {c}",
                    i + 1,
                    row.len()
                )))
            }
            _ => {}
        }
        labels.extend(row);
        rows += 1;
    }
    let cols = cols.ok_or_else(|| UnmixError::Parse("empty label grid".into()))?;
    Ok((ClassLabelMap::from_labels(labels)?, rows, cols))
}

pub fn load_label_grid(path: impl AsRef<Path>) -> Result<(ClassLabelMap, usize, usize)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| UnmixError::io(path, e))?;
    parse_label_grid(&text)
}

pub fn load_seeds(path: impl AsRef<Path>) -> Result<EndmemberSeeds> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| UnmixError::io(path, e))?;
    toml::from_str(&text).map_err(|e| UnmixError::Parse(format!("{}: {e}", path.display())))
}

pub fn save_seeds(seeds: &EndmemberSeeds, path: impl AsRef<Path>) -> Result<()> {
    let text = toml::to_string(seeds).map_err(|e| UnmixError::Parse(e.to_string()))?;
    write_file(path.as_ref(), text.as_bytes())
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    write_file(path.as_ref(), text.as_bytes())
}
