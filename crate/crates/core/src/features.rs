//! Per-region feature vectors.
//!
//! A [`FeaturePack`] is the exchange format between feature extractors and
//! the clustering stage. On disk (`.cmrp`):
//!
//! ```text
//! "CMRP" | u32 version | u32 dim | u64 count | count*dim f32 (LE, row-major)
//!        | JSON trailer {"region_ids": [...], "source_tag": "..."} | u64 trailer length
//! ```
//!
//! All integers are little-endian.
//!
//! [`baseline_features`] is a deterministic colour/gradient/layout descriptor
//! used when no learned backbone is available.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"CMRP";
pub const FORMAT_VERSION: u32 = 1;
pub const BASELINE_DIM: usize = 152;
pub const BASELINE_TAG: &str = "baseline-v1";
pub const BASELINE_CROP: u32 = 224;

const HEADER_LEN: usize = 4 + 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("not a feature pack (bad magic)")]
    BadMagic,
    #[error("unsupported feature pack version {0}")]
    UnsupportedVersion(u32),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("non-finite value in row {0}")]
    NonFiniteValue(usize),
    #[error("duplicate region id {0}")]
    DuplicateRegion(String),
    #[error("crop must be {expected}x{expected}, got {width}x{height}")]
    BadShape {
        expected: u32,
        width: u32,
        height: u32,
    },
    #[error("malformed trailer: {0}")]
    Trailer(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePack {
    pub version: u32,
    pub dim: u32,
    pub region_ids: Vec<String>,
    /// `count x dim`, row-major.
    pub matrix: Vec<f32>,
    pub source_tag: String,
}

#[derive(Serialize, Deserialize)]
struct Trailer {
    region_ids: Vec<String>,
    source_tag: String,
}

impl FeaturePack {
    pub fn new(
        dim: u32,
        region_ids: Vec<String>,
        matrix: Vec<f32>,
        source_tag: impl Into<String>,
    ) -> Result<Self, FeatureError> {
        let pack = FeaturePack {
            version: FORMAT_VERSION,
            dim,
            region_ids,
            matrix,
            source_tag: source_tag.into(),
        };
        pack.check()?;
        Ok(pack)
    }

    pub fn from_rows(
        region_ids: Vec<String>,
        rows: &[Vec<f32>],
        source_tag: impl Into<String>,
    ) -> Result<Self, FeatureError> {
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != dim) {
            return Err(FeatureError::DimMismatch("ragged rows".into()));
        }
        Self::new(dim.max(1) as u32, region_ids, rows.concat(), source_tag)
    }

    pub fn count(&self) -> usize {
        self.region_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim as usize;
        &self.matrix[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.matrix.chunks_exact(self.dim as usize)
    }

    pub fn check(&self) -> Result<(), FeatureError> {
        if self.dim == 0 {
            return Err(FeatureError::DimMismatch("dim must be at least 1".into()));
        }
        let expected = self.region_ids.len() * self.dim as usize;
        if self.matrix.len() != expected {
            return Err(FeatureError::DimMismatch(format!(
                "{} values for {} regions of dim {}",
                self.matrix.len(),
                self.region_ids.len(),
                self.dim
            )));
        }
        if let Some(row) = self.rows().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(FeatureError::NonFiniteValue(row));
        }
        let mut seen = HashSet::with_capacity(self.region_ids.len());
        for id in &self.region_ids {
            if !seen.insert(id.as_str()) {
                return Err(FeatureError::DuplicateRegion(id.clone()));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FeatureError> {
        self.check()?;
        let trailer = serde_json::to_vec(&Trailer {
            region_ids: self.region_ids.clone(),
            source_tag: self.source_tag.clone(),
        })
        .map_err(|e| FeatureError::Trailer(e.to_string()))?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.matrix.len() * 4 + trailer.len() + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.dim.to_le_bytes());
        out.extend_from_slice(&(self.count() as u64).to_le_bytes());
        for v in &self.matrix {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&trailer);
        out.extend_from_slice(&(trailer.len() as u64).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FeatureError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(FeatureError::BadMagic);
        }
        if bytes.len() < HEADER_LEN + 8 {
            return Err(FeatureError::DimMismatch("truncated header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != FORMAT_VERSION {
            return Err(FeatureError::UnsupportedVersion(version));
        }
        let dim = u32_at(8);
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let values = (count as u128) * (dim as u128);
        let body_end = HEADER_LEN as u128 + values * 4;
        let trailer_len = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap()) as u128;
        if body_end + trailer_len + 8 != bytes.len() as u128 {
            return Err(FeatureError::DimMismatch(format!(
                "{count}x{dim} matrix with a {trailer_len}-byte trailer does not fit {} bytes",
                bytes.len()
            )));
        }
        let body_end = body_end as usize;
        let matrix: Vec<f32> = bytes[HEADER_LEN..body_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let trailer: Trailer = serde_json::from_slice(&bytes[body_end..bytes.len() - 8])
            .map_err(|e| FeatureError::Trailer(e.to_string()))?;
        if trailer.region_ids.len() as u64 != count {
            return Err(FeatureError::DimMismatch(format!(
                "header count {count} but {} region ids",
                trailer.region_ids.len()
            )));
        }
        let pack = FeaturePack {
            version,
            dim,
            region_ids: trailer.region_ids,
            matrix,
            source_tag: trailer.source_tag,
        };
        pack.check()?;
        Ok(pack)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), FeatureError> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, FeatureError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

pub fn write_pack(pack: &FeaturePack, path: &Path) -> Result<(), FeatureError> {
    crate::util::write_atomic(path, &pack.to_bytes()?)?;
    Ok(())
}

pub fn read_pack(path: &Path) -> Result<FeaturePack, FeatureError> {
    FeaturePack::from_bytes(&std::fs::read(path)?)
}

fn l1_normalize(block: &mut [f32]) {
    let sum: f32 = block.iter().sum();
    if sum > 0.0 {
        block.iter_mut().for_each(|v| *v /= sum);
    }
}

fn luminance(p: &image::Rgb<u8>) -> f32 {
    (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32) / 255.0
}

/// Hand-crafted 152-dim descriptor of a 224x224 crop:
///
/// * `[0, 48)`: 16-bin histogram per RGB channel, each L1-normalized.
/// * `[48, 80)`: 8-bin gradient-orientation histogram (central differences,
///   magnitude-weighted) for each cell of a 2x2 grid, each L1-normalized.
/// * `[80, 152)`: 6x6 grid of mean luminance and mean chroma (`max - min`
///   of the channels), both in `[0, 1]`.
///
/// Blocks with no mass stay zero.
pub fn baseline_features(crop: &RgbImage) -> Result<Vec<f32>, FeatureError> {
    let (w, h) = crop.dimensions();
    if w != BASELINE_CROP || h != BASELINE_CROP {
        return Err(FeatureError::BadShape {
            expected: BASELINE_CROP,
            width: w,
            height: h,
        });
    }
    let mut out = vec![0f32; BASELINE_DIM];

    let (color, rest) = out.split_at_mut(48);
    for p in crop.pixels() {
        for c in 0..3 {
            color[c * 16 + (p[c] >> 4) as usize] += 1.0;
        }
    }
    color.chunks_exact_mut(16).for_each(l1_normalize);

    let (grad, layout) = rest.split_at_mut(32);
    let luma: Vec<f32> = crop.pixels().map(luminance).collect();
    let at = |x: u32, y: u32| luma[(y * w + x) as usize];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = at(x + 1, y) - at(x - 1, y);
            let gy = at(x, y + 1) - at(x, y - 1);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag <= 0.0 {
                continue;
            }
            let angle = gy.atan2(gx).rem_euclid(std::f32::consts::TAU);
            let bin = ((angle / std::f32::consts::TAU * 8.0) as usize).min(7);
            let cell = (y >= h / 2) as usize * 2 + (x >= w / 2) as usize;
            grad[cell * 8 + bin] += mag;
        }
    }
    grad.chunks_exact_mut(8).for_each(l1_normalize);

    const GRID: u32 = 6;
    for gy in 0..GRID {
        let (y0, y1) = (gy * h / GRID, (gy + 1) * h / GRID);
        for gx in 0..GRID {
            let (x0, x1) = (gx * w / GRID, (gx + 1) * w / GRID);
            let (mut l, mut c) = (0f32, 0f32);
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = crop.get_pixel(x, y);
                    l += luma[(y * w + x) as usize];
                    let (mx, mn) = (p.0.iter().max().unwrap(), p.0.iter().min().unwrap());
                    c += (mx - mn) as f32 / 255.0;
                }
            }
            let n = ((y1 - y0) * (x1 - x0)) as f32;
            let cell = ((gy * GRID + gx) * 2) as usize;
            layout[cell] = l / n;
            layout[cell + 1] = c / n;
        }
    }
    Ok(out)
}
