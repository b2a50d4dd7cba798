//! Procedural lesion-change pairs.
//!
//! Scan 1 is a dark field with a few bright soft-edged discs. For a
//! progression pair, scan 2 grows every disc and adds new ones; for a
//! regression pair it shrinks them and drops some. Both scans get
//! independent Gaussian pixel noise.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{write_pgm, DataError, RawImage};
use crate::model::Class;
use crate::rng::{splitmix64_mix, GaussianStream, Xoshiro256StarStar};

const BACKGROUND: f64 = 0.08;
const EDGE_WIDTH: f64 = 1.5;
const PEAK_RANGE: (f64, f64) = (0.7, 1.0);
/// Disc centers stay within this fraction of the image away from each border.
const CENTER_MARGIN: f64 = 0.15;
/// Pixels brighter than this count towards [`bright_mass`].
pub const BRIGHT_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProgressionDelta {
    pub extra_blobs: usize,
    pub radius_growth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskConfig {
    pub n_pairs: usize,
    pub image_size: usize,
    pub blob_count_range: (usize, usize),
    pub radius_range: (f64, f64),
    pub progression_delta: ProgressionDelta,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        Self {
            n_pairs: 20,
            image_size: 64,
            blob_count_range: (2, 5),
            radius_range: (3.0, 7.0),
            progression_delta: ProgressionDelta {
                extra_blobs: 2,
                radius_growth: 1.4,
            },
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        if self.n_pairs == 0 || self.n_pairs % 2 != 0 {
            return bad(format!(
                "pair count must be a positive even number for class balance, got {}",
                self.n_pairs
            ));
        }
        if self.image_size < 2 {
            return bad(format!("image size must be >= 2, got {}", self.image_size));
        }
        let (lo, hi) = self.blob_count_range;
        if lo > hi {
            return bad(format!("blob count range ({lo}, {hi}) is empty"));
        }
        let (rlo, rhi) = self.radius_range;
        if !(rlo > 0.0 && rlo <= rhi) {
            return bad(format!("radius range ({rlo}, {rhi}) is invalid"));
        }
        if !(self.progression_delta.radius_growth >= 1.0) {
            return bad("radius growth must be >= 1".into());
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub peak: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub scan1: RawImage,
    pub scan2: RawImage,
    pub label: Class,
    pub blobs1: Vec<Blob>,
    pub blobs2: Vec<Blob>,
}

fn uniform(rng: &mut Xoshiro256StarStar, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.next_f64()
}

fn random_blob(rng: &mut Xoshiro256StarStar, cfg: &SyntheticTaskConfig) -> Blob {
    let size = cfg.image_size as f64;
    let (lo, hi) = (CENTER_MARGIN * size, (1.0 - CENTER_MARGIN) * size);
    Blob {
        cx: uniform(rng, lo, hi),
        cy: uniform(rng, lo, hi),
        radius: uniform(rng, cfg.radius_range.0, cfg.radius_range.1),
        peak: uniform(rng, PEAK_RANGE.0, PEAK_RANGE.1),
    }
}

fn render(blobs: &[Blob], size: usize, noise_std: f64, noise: &mut GaussianStream) -> RawImage {
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = BACKGROUND;
            for b in blobs {
                let d = ((px - b.cx).powi(2) + (py - b.cy).powi(2)).sqrt();
                let t = ((b.radius - d) / EDGE_WIDTH + 0.5).clamp(0.0, 1.0);
                let edge = t * t * (3.0 - 2.0 * t);
                v = v.max(BACKGROUND + (b.peak - BACKGROUND) * edge);
            }
            v += noise_std * noise.next_f64();
            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u16);
        }
    }
    RawImage::new(size, size, 255, pixels)
}

/// Generates the pairs described by `cfg` in memory. Deterministic in `cfg`.
pub fn synthesize(cfg: &SyntheticTaskConfig) -> Result<Vec<SyntheticPair>, DataError> {
    cfg.validate()?;
    let mut rng = Xoshiro256StarStar::seed_from_u64(cfg.seed);
    let mut noise = GaussianStream::new(splitmix64_mix(cfg.seed ^ 0x6E6F_6973_6500_0000));

    let half = cfg.n_pairs / 2;
    let mut labels: Vec<Class> = std::iter::repeat(Class::Progression)
        .take(half)
        .chain(std::iter::repeat(Class::Regression).take(half))
        .collect();
    for i in (1..labels.len()).rev() {
        let j = rng.range_inclusive(0, i as u64) as usize;
        labels.swap(i, j);
    }

    let delta = cfg.progression_delta;
    let mut pairs = Vec::with_capacity(cfg.n_pairs);
    for label in labels {
        let k = rng.range_inclusive(cfg.blob_count_range.0 as u64, cfg.blob_count_range.1 as u64);
        let blobs1: Vec<Blob> = (0..k).map(|_| random_blob(&mut rng, cfg)).collect();
        let blobs2: Vec<Blob> = match label {
            Class::Progression => {
                let mut grown: Vec<Blob> = blobs1
                    .iter()
                    .map(|b| Blob {
                        radius: b.radius * delta.radius_growth,
                        ..*b
                    })
                    .collect();
                grown.extend((0..delta.extra_blobs).map(|_| random_blob(&mut rng, cfg)));
                grown
            }
            Class::Regression => {
                let keep = blobs1.len().saturating_sub(delta.extra_blobs);
                blobs1[..keep]
                    .iter()
                    .map(|b| Blob {
                        radius: b.radius / delta.radius_growth,
                        ..*b
                    })
                    .collect()
            }
        };
        let scan1 = render(&blobs1, cfg.image_size, cfg.noise_std, &mut noise);
        let scan2 = render(&blobs2, cfg.image_size, cfg.noise_std, &mut noise);
        pairs.push(SyntheticPair {
            scan1,
            scan2,
            label,
            blobs1,
            blobs2,
        });
    }
    Ok(pairs)
}

/// Writes `<split>_NNN_scan{1,2}.pgm` images and a `<split>.csv` manifest into `out_dir`.
pub fn gen_synthetic(
    cfg: &SyntheticTaskConfig,
    out_dir: impl AsRef<Path>,
    split: &str,
) -> Result<PathBuf, DataError> {
    let out_dir = out_dir.as_ref();
    let pairs = synthesize(cfg)?;
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DataError::Io { path, source }
    };
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let mut manifest = String::from("scan1,scan2,label\n");
    for (i, pair) in pairs.iter().enumerate() {
        let names = [
            format!("{split}_{i:03}_scan1.pgm"),
            format!("{split}_{i:03}_scan2.pgm"),
        ];
        for (name, image) in names.iter().zip([&pair.scan1, &pair.scan2]) {
            let path = out_dir.join(name);
            write_pgm(&path, image).map_err(io_err(&path))?;
        }
        manifest.push_str(&format!("{},{},{}\n", names[0], names[1], pair.label.index()));
    }
    let manifest_path = out_dir.join(format!("{split}.csv"));
    let mut file = std::fs::File::create(&manifest_path).map_err(io_err(&manifest_path))?;
    file.write_all(manifest.as_bytes())
        .map_err(io_err(&manifest_path))?;
    Ok(manifest_path)
}

/// Total intensity of pixels above [`BRIGHT_THRESHOLD`].
pub fn bright_mass(values: &[f32]) -> f64 {
    values
        .iter()
        .filter(|&&v| v > BRIGHT_THRESHOLD)
        .map(|&v| f64::from(v))
        .sum()
}
