//! Directory-level glue shared by the command line tool and the review server.

use std::collections::BTreeMap;
use std::path::Path;

use image::{ImageEncoder, RgbImage};
use rayon::prelude::*;
use thiserror::Error;

use crate::clustering::{ClusterError, ClusterModel};
use crate::features::{baseline_features, FeatureError, FeaturePack, BASELINE_CROP, BASELINE_TAG};
use crate::labeling::{apply_merge, rasterize, write_label_png, LabelError, LabelMap, MergeMap, IGNORE_LABEL};
use crate::masks::{crop_region, load_manifest, load_mask_dir, ImageRecord, MaskError, MaskRecord};
use crate::metrics::{ConfusionMatrix, MetricsError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("no ground truth for image {0}")]
    MissingGroundTruth(String),
}

/// Images plus their mask proposals.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
    pub masks: Vec<MaskRecord>,
}

impl Dataset {
    pub fn load(manifest: &Path, mask_dir: &Path) -> Result<Self, PipelineError> {
        let images = load_manifest(manifest)?;
        let masks = load_mask_dir(mask_dir, &images)?;
        Ok(Dataset { images, masks })
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    pub fn mask(&self, mask_id: &str) -> Option<&MaskRecord> {
        self.masks.iter().find(|m| m.mask_id == mask_id)
    }

    /// Masks grouped by image id, in input order.
    pub fn masks_by_image(&self) -> BTreeMap<&str, Vec<&MaskRecord>> {
        let mut out: BTreeMap<&str, Vec<&MaskRecord>> = BTreeMap::new();
        for m in &self.masks {
            out.entry(m.image_id.as_str()).or_default().push(m);
        }
        out
    }
}

/// Baseline descriptors for every mask, rows in mask order. Each image is
/// decoded once.
pub fn extract_baseline(data: &Dataset) -> Result<FeaturePack, PipelineError> {
    let by_image = data.masks_by_image();
    let per_image: Vec<Vec<(String, Vec<f32>)>> = data
        .images
        .par_iter()
        .filter(|img| by_image.contains_key(img.image_id.as_str()))
        .map(|img| -> Result<_, PipelineError> {
            let rgb = img.load_rgb()?;
            by_image[img.image_id.as_str()]
                .iter()
                .map(|m| {
                    let crop = crop_region(&rgb, m, BASELINE_CROP)?;
                    Ok((m.mask_id.clone(), baseline_features(&crop)?))
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let mut rows: BTreeMap<String, Vec<f32>> = per_image.into_iter().flatten().collect();
    let ordered: Vec<(String, Vec<f32>)> = data
        .masks
        .iter()
        .filter_map(|m| rows.remove(&m.mask_id).map(|r| (m.mask_id.clone(), r)))
        .collect();
    let (ids, rows): (Vec<_>, Vec<_>) = ordered.into_iter().unzip();
    Ok(FeaturePack::from_rows(ids, &rows, BASELINE_TAG)?)
}

/// Pseudo-label every image. Masks that are missing from the model (for
/// instance because the area filter removed them) or whose cluster is
/// discarded leave their pixels unlabeled.
pub fn rasterize_all(data: &Dataset, model: &ClusterModel, merge: &MergeMap) -> Result<Vec<LabelMap>, PipelineError> {
    let classes = apply_merge(model, merge)?;
    let by_image = data.masks_by_image();
    data.images
        .par_iter()
        .map(|img| rasterize_image(img, by_image.get(img.image_id.as_str()).map_or(&[][..], |v| v), &classes))
        .collect()
}

/// Rasterize one image given region classes from [`apply_merge`].
pub fn rasterize_image(
    image: &ImageRecord,
    masks: &[&MaskRecord],
    classes: &BTreeMap<String, Option<u8>>,
) -> Result<LabelMap, PipelineError> {
    let painted: Vec<(&MaskRecord, u8)> = masks
        .iter()
        .filter_map(|m| classes.get(&m.mask_id).copied().flatten().map(|c| (*m, c)))
        .collect();
    Ok(rasterize(image, &painted)?)
}

pub fn write_labels(dir: &Path, labels: &[LabelMap]) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir)?;
    labels
        .par_iter()
        .try_for_each(|l| write_label_png(l, &dir.join(format!("{}.png", l.image_id))))?;
    Ok(())
}

/// Score predictions against ground-truth maps matched by image id.
pub fn evaluate_maps(gt: &[LabelMap], pred: &[LabelMap], n_classes: u32) -> Result<ConfusionMatrix, PipelineError> {
    let gt: BTreeMap<&str, &LabelMap> = gt.iter().map(|g| (g.image_id.as_str(), g)).collect();
    let parts: Vec<ConfusionMatrix> = pred
        .par_iter()
        .map(|p| {
            let g = gt
                .get(p.image_id.as_str())
                .ok_or_else(|| PipelineError::MissingGroundTruth(p.image_id.clone()))?;
            let mut c = ConfusionMatrix::new(n_classes);
            c.accumulate(g, p)?;
            Ok(c)
        })
        .collect::<Result<_, PipelineError>>()?;
    let mut total = ConfusionMatrix::new(n_classes);
    for c in &parts {
        total.merge(c)?;
    }
    Ok(total)
}

pub fn encode_png_rgb(img: &RgbImage) -> Result<Vec<u8>, PipelineError> {
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out).write_image(
        img.as_raw(),
        img.width(),
        img.height(),
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(out)
}

/// Fixed display colour for a class index.
pub fn class_color(class: u8) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 12] = [
        [128, 64, 128],
        [250, 250, 250],
        [250, 200, 0],
        [0, 130, 200],
        [230, 25, 75],
        [60, 180, 75],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [170, 110, 40],
        [0, 0, 128],
        [128, 128, 0],
    ];
    let base = PALETTE[class as usize % PALETTE.len()];
    let shift = (class as usize / PALETTE.len()) as u8;
    base.map(|c| c.wrapping_add(shift.wrapping_mul(37)))
}

/// Blend class colours over the image at half opacity. Ignore pixels keep
/// the original colour.
pub fn overlay(image: &RgbImage, label: &LabelMap) -> RgbImage {
    let mut out = image.clone();
    for (i, px) in out.pixels_mut().enumerate() {
        let l = label.data[i];
        if l != IGNORE_LABEL {
            let c = class_color(l);
            for ch in 0..3 {
                px.0[ch] = ((px.0[ch] as u16 + c[ch] as u16 + 1) / 2) as u8;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, MaskNoise, SynthConfig};

    #[test]
    fn overlay_leaves_ignore_pixels() {
        let img = RgbImage::from_pixel(2, 1, image::Rgb([10, 20, 30]));
        let label = LabelMap {
            image_id: "a".into(),
            width: 2,
            height: 1,
            data: vec![IGNORE_LABEL, 0],
        };
        let out = overlay(&img, &label);
        assert_eq!(out.get_pixel(0, 0).0, [10, 20, 30]);
        assert_ne!(out.get_pixel(1, 0).0, [10, 20, 30]);
    }

    #[test]
    fn distinct_palette_for_small_indices() {
        let colors: Vec<_> = (0..=40u8).map(class_color).collect();
        for i in 0..colors.len() {
            for j in 0..i {
                assert_ne!(colors[i], colors[j], "{i} {j}");
            }
        }
    }

    #[test]
    fn baseline_pack_follows_mask_order() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_images: 2,
            image_size: 96,
            mask_noise: MaskNoise {
                split_prob: 0.0,
                dilate_px: 0,
            },
            ..Default::default()
        };
        generate(&cfg).unwrap().write(dir.path()).unwrap();
        let data = Dataset::load(&dir.path().join("manifest.json"), &dir.path().join("masks")).unwrap();
        let pack = extract_baseline(&data).unwrap();
        let ids: Vec<_> = data.masks.iter().map(|m| m.mask_id.clone()).collect();
        assert_eq!(pack.region_ids, ids);
        assert_eq!(pack.dim as usize, crate::features::BASELINE_DIM);
    }
}
