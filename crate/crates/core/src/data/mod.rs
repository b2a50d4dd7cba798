//! Labeled image-pair datasets: manifest loading, preprocessing, and a
//! synthetic lesion-change generator.

mod pgm;
mod synthetic;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::model::Class;
use crate::tensor::{Shape, Tensor};

pub use pgm::{decode_pgm, encode_pgm, load_pgm, write_pgm, PgmError, RawImage};
pub use synthetic::{
    bright_mass, gen_synthetic, synthesize, Blob, ProgressionDelta, SyntheticPair,
    SyntheticTaskConfig,
};

pub const MANIFEST_HEADER: [&str; 3] = ["scan1", "scan2", "label"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("row {row}: image {path} does not exist")]
    MissingFile { row: usize, path: PathBuf },
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("row {row}: bad label {value:?}, expected 0 or 1")]
    BadLabel { row: usize, value: String },
    #[error("row {row}: image {path}: {source}")]
    Image {
        row: usize,
        path: PathBuf,
        source: PgmError,
    },
    #[error("{context}: image {width}x{height} is too small (need at least 2x2)")]
    DegenerateImage {
        context: String,
        width: usize,
        height: usize,
    },
    #[error("row {row}: {message}")]
    Shape { row: usize, message: String },
    #[error("dataset {0:?} is empty")]
    EmptyDataset(String),
    #[error("{0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Pgm(#[from] PgmError),
}

/// One labeled (scan 1, scan 2) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub scan1: Tensor,
    pub scan2: Tensor,
    pub label: Class,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    samples: Vec<PairSample>,
}

impl Dataset {
    /// Checks non-emptiness, matching scan shapes, and the `[0, 1]` pixel range.
    pub fn new(name: impl Into<String>, samples: Vec<PairSample>) -> Result<Self, DataError> {
        let name = name.into();
        let Some(first) = samples.first() else {
            return Err(DataError::EmptyDataset(name));
        };
        let shape = first.scan1.shape();
        for (i, s) in samples.iter().enumerate() {
            let row = i + 1;
            if s.scan1.shape() != shape || s.scan2.shape() != shape {
                return Err(DataError::Shape {
                    row,
                    message: format!(
                        "scan shapes {} / {} differ from {shape}",
                        s.scan1.shape(),
                        s.scan2.shape()
                    ),
                });
            }
            let in_range = |t: &Tensor| t.data().iter().all(|v| (0.0..=1.0).contains(v));
            if !in_range(&s.scan1) || !in_range(&s.scan2) {
                return Err(DataError::Shape {
                    row,
                    message: "pixel values outside [0, 1]".into(),
                });
            }
        }
        Ok(Self { name, samples })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn samples(&self) -> &[PairSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_shape(&self) -> Shape {
        self.samples[0].scan1.shape()
    }

    /// Number of samples carrying each label, indexed by class.
    pub fn class_counts(&self) -> [usize; 2] {
        let mut counts = [0; 2];
        for s in &self.samples {
            counts[s.label.index()] += 1;
        }
        counts
    }

    /// Builds a dataset from in-memory rasters, preprocessing each to `target_size`.
    pub fn from_raw(
        name: impl Into<String>,
        pairs: &[SyntheticPair],
        target_size: usize,
    ) -> Result<Self, DataError> {
        let samples = pairs
            .iter()
            .map(|p| {
                Ok(PairSample {
                    scan1: preprocess(&p.scan1, target_size)?,
                    scan2: preprocess(&p.scan2, target_size)?,
                    label: p.label,
                })
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        Self::new(name, samples)
    }
}

/// Bilinear resize to `target_size` squared (half-pixel centers, edge clamped),
/// then scale into `[0, 1]` by `1 / maxval`.
pub fn preprocess(raw: &RawImage, target_size: usize) -> Result<Tensor, DataError> {
    if raw.width < 2 || raw.height < 2 || target_size == 0 {
        return Err(DataError::DegenerateImage {
            context: "preprocess".into(),
            width: raw.width,
            height: raw.height,
        });
    }
    let inv_max = 1.0 / f64::from(raw.maxval);
    let xs = sample_axis(raw.width, target_size);
    let ys = sample_axis(raw.height, target_size);
    let mut data = Vec::with_capacity(target_size * target_size);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let p = |x: usize, y: usize| f64::from(raw.get(x, y));
            let top = lerp(p(x0, y0), p(x1, y0), fx);
            let bottom = lerp(p(x0, y1), p(x1, y1), fx);
            let v = lerp(top, bottom, fy) * inv_max;
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Ok(Tensor::from_vec(Shape::new(1, target_size, target_size), data)
        .expect("preprocess produces exactly target_size^2 values"))
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}

fn sample_axis(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

struct ManifestRow {
    row: usize,
    scan1: PathBuf,
    scan2: PathBuf,
    label: Class,
}

fn parse_manifest(path: &Path) -> Result<Vec<ManifestRow>, DataError> {
    let manifest_err = |message: String| DataError::Manifest {
        path: path.to_path_buf(),
        message,
    };
    let file = std::fs::File::open(path).map_err(|e| manifest_err(format!("cannot open: {e}")))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| manifest_err(format!("cannot read header: {e}")))?;
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(manifest_err(format!(
            "header must be `scan1,scan2,label`, found `{}`",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| DataError::Parse {
            row,
            message: e.to_string(),
        })?;
        let (scan1, scan2, label) = (&record[0], &record[1], &record[2]);
        let label = match label {
            "0" => Class::Regression,
            "1" => Class::Progression,
            other => {
                return Err(DataError::BadLabel {
                    row,
                    value: other.to_string(),
                })
            }
        };
        if scan1.is_empty() || scan2.is_empty() {
            return Err(DataError::Parse {
                row,
                message: "empty image path".into(),
            });
        }
        rows.push(ManifestRow {
            row,
            scan1: base.join(scan1),
            scan2: base.join(scan2),
            label,
        });
    }
    Ok(rows)
}

fn load_row_image(row: usize, path: &Path, target_size: usize) -> Result<Tensor, DataError> {
    if !path.is_file() {
        return Err(DataError::MissingFile {
            row,
            path: path.to_path_buf(),
        });
    }
    let raw = load_pgm(path).map_err(|source| DataError::Image {
        row,
        path: path.to_path_buf(),
        source,
    })?;
    preprocess(&raw, target_size).map_err(|e| match e {
        DataError::DegenerateImage { width, height, .. } => DataError::DegenerateImage {
            context: format!("row {row}: {}", path.display()),
            width,
            height,
        },
        other => other,
    })
}

/// Loads every pair listed in a `scan1,scan2,label` CSV manifest.
///
/// Image paths are resolved against the manifest's directory. Rows load in
/// parallel; the dataset keeps manifest order and reports the first failing row.
pub fn load_manifest(path: impl AsRef<Path>, target_size: usize) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let rows = parse_manifest(path)?;
    if rows.is_empty() {
        return Err(DataError::EmptyDataset(path.display().to_string()));
    }
    let loaded: Vec<Result<PairSample, DataError>> = rows
        .par_iter()
        .map(|r| {
            Ok(PairSample {
                scan1: load_row_image(r.row, &r.scan1, target_size)?,
                scan2: load_row_image(r.row, &r.scan2, target_size)?,
                label: r.label,
            })
        })
        .collect();
    let samples = loaded.into_iter().collect::<Result<Vec<_>, _>>()?;
    let name = path
        .file_stem()
        .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resize_only_rescales() {
        let raw = RawImage::new(2, 2, 100, vec![0, 25, 50, 100]);
        let t = preprocess(&raw, 2).unwrap();
        assert_eq!(t.data(), &[0.0, 0.25, 0.5, 1.0]);
    }

    #[test]
    fn constant_image_stays_constant() {
        let raw = RawImage::new(5, 3, 200, vec![50; 15]);
        for size in [1, 2, 7, 16] {
            let t = preprocess(&raw, size).unwrap();
            assert!(t.data().iter().all(|&v| v == 0.25), "size {size}");
        }
    }

    #[test]
    fn checkerboard_center_sample() {
        let raw = RawImage::new(2, 2, 255, vec![0, 255, 255, 0]);
        assert_eq!(preprocess(&raw, 1).unwrap().data(), &[0.5]);
    }

    #[test]
    fn rejects_tiny_images() {
        let raw = RawImage::new(1, 4, 255, vec![0; 4]);
        assert!(matches!(preprocess(&raw, 4), Err(DataError::DegenerateImage { .. })));
    }

    #[test]
    fn dataset_rejects_empty_and_out_of_range() {
        assert!(matches!(Dataset::new("x", vec![]), Err(DataError::EmptyDataset(_))));
        let shape = Shape::new(1, 2, 2);
        let bad = PairSample {
            scan1: Tensor::from_vec(shape, vec![0.0, 0.5, 1.5, 0.0]).unwrap(),
            scan2: Tensor::zeros(shape),
            label: Class::Regression,
        };
        assert!(matches!(Dataset::new("x", vec![bad]), Err(DataError::Shape { row: 1, .. })));
    }
}
