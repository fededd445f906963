//! Built-in nearest-prototype segmenter standing in for a real network.
//!
//! Each pixel is described by its own colour and the mean colour of the
//! 9x9 patch around it. Training averages the descriptors of a seeded
//! sample of labeled pixels per class and learns a per-class acceptance
//! radius. Prediction assigns the nearest prototype, or the ignore value if
//! the pixel is outside that prototype's radius.

use std::path::Path;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::TrainManifest;
use crate::labeling::{read_label_png, write_label_png, LabelError, LabelMap, IGNORE_LABEL};
use crate::masks::{load_manifest, ImageRecord, MaskError};
use crate::util;

pub const PATCH: u32 = 9;
pub const FEATURE_DIM: usize = 6;
const FEATURE_NAME: &str = "rgb+mean9";

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("{image_id}: label is {lw}x{lh}, image is {iw}x{ih}")]
    ShapeMismatch {
        image_id: String,
        lw: u32,
        lh: u32,
        iw: u32,
        ih: u32,
    },
    #[error("model was trained with feature {0}")]
    UnknownFeature(String),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyParams {
    pub seed: u64,
    /// Fraction of labeled pixels sampled per image.
    pub sample_rate: f64,
    pub radius_quantile: f64,
    pub radius_scale: f64,
    /// Added to every radius so single-colour classes keep some tolerance.
    pub radius_floor: f64,
}

impl Default for ToyParams {
    fn default() -> Self {
        ToyParams {
            seed: 0,
            sample_rate: 0.25,
            radius_quantile: 0.99,
            radius_scale: 1.5,
            radius_floor: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub feature: String,
    pub n_classes: u32,
    /// `None` for classes without labeled pixels; those are never predicted.
    pub prototypes: Vec<Option<Vec<f64>>>,
    pub radii: Vec<f64>,
}

/// Per-pixel descriptors, row-major, `FEATURE_DIM` values each.
pub fn pixel_features(img: &RgbImage) -> Vec<[f64; FEATURE_DIM]> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    // summed-area table per channel
    let mut sat = vec![[0u64; 3]; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = [0u64; 3];
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32).0;
            for c in 0..3 {
                row[c] += p[c] as u64;
                sat[(y + 1) * (w + 1) + x + 1][c] = sat[y * (w + 1) + x + 1][c] + row[c];
            }
        }
    }
    let r = (PATCH / 2) as usize;
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            let p = img.get_pixel(x as u32, y as u32).0;
            let mut f = [0.0; FEATURE_DIM];
            for c in 0..3 {
                let s = sat[y1 * (w + 1) + x1][c] + sat[y0 * (w + 1) + x0][c]
                    - sat[y0 * (w + 1) + x1][c]
                    - sat[y1 * (w + 1) + x0][c];
                f[c] = p[c] as f64;
                f[3 + c] = 0.5 * s as f64 / n;
            }
            out.push(f);
        }
    }
    out
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn load_rgb(path: &Path) -> Result<RgbImage, ToyError> {
    Ok(image::open(path)?.to_rgb8())
}

/// Train on the `train` split of a manifest.
pub fn train(manifest: &Path, params: &ToyParams) -> Result<ToyModel, ToyError> {
    let m: TrainManifest = util::read_json(manifest)?;
    let n = m.n_classes as usize;
    let samples: Vec<Vec<(u8, [f64; FEATURE_DIM])>> = m
        .train
        .par_iter()
        .enumerate()
        .map(|(i, item)| -> Result<_, ToyError> {
            let img = load_rgb(&item.image)?;
            let label = read_label_png(&item.label)?;
            if (label.width, label.height) != img.dimensions() {
                return Err(ToyError::ShapeMismatch {
                    image_id: item.image_id.clone(),
                    lw: label.width,
                    lh: label.height,
                    iw: img.width(),
                    ih: img.height(),
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(i as u64);
            let feats = pixel_features(&img);
            Ok(label
                .data
                .iter()
                .zip(feats)
                .filter(|(&l, _)| (l as usize) < n)
                .filter(|_| rng.random_bool(params.sample_rate.clamp(0.0, 1.0)))
                .map(|(&l, f)| (l, f))
                .collect())
        })
        .collect::<Result<_, _>>()?;

    let mut sums = vec![[0.0; FEATURE_DIM]; n];
    let mut counts = vec![0usize; n];
    for &(l, f) in samples.iter().flatten() {
        counts[l as usize] += 1;
        for (s, v) in sums[l as usize].iter_mut().zip(f) {
            *s += v;
        }
    }
    let prototypes: Vec<Option<Vec<f64>>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| (c > 0).then(|| s.iter().map(|v| v / c as f64).collect()))
        .collect();
    let mut dists = vec![Vec::new(); n];
    for &(l, f) in samples.iter().flatten() {
        if let Some(p) = &prototypes[l as usize] {
            dists[l as usize].push(dist(&f, p));
        }
    }
    let radii = dists
        .into_iter()
        .map(|mut d| {
            if d.is_empty() {
                return 0.0;
            }
            d.sort_by(f64::total_cmp);
            let q = d[((d.len() - 1) as f64 * params.radius_quantile).round() as usize];
            q * params.radius_scale + params.radius_floor
        })
        .collect();
    Ok(ToyModel {
        feature: FEATURE_NAME.into(),
        n_classes: m.n_classes,
        prototypes,
        radii,
    })
}

pub fn predict(model: &ToyModel, image_id: &str, img: &RgbImage) -> LabelMap {
    let data = pixel_features(img)
        .iter()
        .map(|f| {
            let best = model
                .prototypes
                .iter()
                .enumerate()
                .filter_map(|(c, p)| p.as_ref().map(|p| (c, dist(f, p))))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match best {
                Some((c, d)) if d <= model.radii[c] => c as u8,
                _ => IGNORE_LABEL,
            }
        })
        .collect();
    LabelMap {
        image_id: image_id.into(),
        width: img.width(),
        height: img.height(),
        data,
    }
}

fn predict_record(model: &ToyModel, rec: &ImageRecord, out: &Path) -> Result<(), ToyError> {
    let img = rec.load_rgb()?;
    let label = predict(model, &rec.image_id, &img);
    write_label_png(&label, &out.join(format!("{}.png", rec.image_id)))?;
    Ok(())
}

/// Predict every image of an image manifest into `out/{image_id}.png`.
pub fn predict_manifest(model: &ToyModel, images: &Path, out: &Path) -> Result<(), ToyError> {
    if model.feature != FEATURE_NAME {
        return Err(ToyError::UnknownFeature(model.feature.clone()));
    }
    let records = load_manifest(images)?;
    std::fs::create_dir_all(out)?;
    records.par_iter().try_for_each(|r| predict_record(model, r, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_mean_of_uniform_image() {
        let img = RgbImage::from_pixel(5, 4, image::Rgb([10, 20, 30]));
        for f in pixel_features(&img) {
            assert_eq!(f, [10.0, 20.0, 30.0, 5.0, 10.0, 15.0]);
        }
    }

    #[test]
    fn patch_mean_matches_naive() {
        let mut img = RgbImage::new(13, 11);
        for (x, y, p) in img.enumerate_pixels_mut() {
            *p = image::Rgb([(x * 17 + y * 3) as u8, (x * y) as u8, (200 - x - y) as u8]);
        }
        let feats = pixel_features(&img);
        for y in 0..11i64 {
            for x in 0..13i64 {
                let mut s = [0.0; 3];
                let mut n = 0.0;
                for yy in (y - 4).max(0)..(y + 5).min(11) {
                    for xx in (x - 4).max(0)..(x + 5).min(13) {
                        let p = img.get_pixel(xx as u32, yy as u32).0;
                        for c in 0..3 {
                            s[c] += p[c] as f64;
                        }
                        n += 1.0;
                    }
                }
                let f = feats[(y * 13 + x) as usize];
                for c in 0..3 {
                    assert!((f[3 + c] - 0.5 * s[c] / n).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn empty_class_never_predicted() {
        let model = ToyModel {
            feature: FEATURE_NAME.into(),
            n_classes: 3,
            prototypes: vec![Some(vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0]), None, Some(vec![255.0, 0.0, 0.0, 127.5, 0.0, 0.0])],
            radii: vec![20.0, 0.0, 20.0],
        };
        let mut img = RgbImage::new(20, 20);
        for (x, _, p) in img.enumerate_pixels_mut() {
            *p = image::Rgb([if x < 10 { 0 } else { 255 }, 0, 0]);
        }
        let l = predict(&model, "a", &img);
        assert!(l.data.iter().all(|&v| v != 1));
        assert_eq!(l.get(0, 0), 0);
        assert_eq!(l.get(19, 0), 2);
        // pixels near the edge have mixed patch means beyond both radii
        assert_eq!(l.get(10, 0), IGNORE_LABEL);
    }
}
