//! Deterministic synthetic road scenes.
//!
//! Each image is a solid background plane with a few solid-colour objects
//! drawn from distinct shape families. The generator emits the RGB images,
//! exact ground-truth label maps and mask proposals, optionally damaged the
//! way real mask generators damage them: objects split into two masks and
//! masks dilated past the object boundary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{ImageEncoder, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::ClusterModel;
use crate::labeling::{write_label_png, LabelError, LabelMap, MergeMap, MergeTarget, IGNORE_LABEL};
use crate::masks::{write_mask_dir, Bitmask, ImageRecord, MaskError, MaskRecord};
use crate::util;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    /// Fills everything no object covers.
    BackgroundPlane,
    Stripe,
    Blob,
    ThinBar,
    SmallDisc,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthClass {
    pub name: String,
    pub color: [u8; 3],
    pub shape: ShapeFamily,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskNoise {
    /// Probability that an object's mask is cut in two along its long axis.
    pub split_prob: f64,
    /// Square dilation radius applied to object masks.
    pub dilate_px: u32,
}

impl Default for MaskNoise {
    fn default() -> Self {
        MaskNoise {
            split_prob: 0.2,
            dilate_px: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_images: u32,
    pub image_size: u32,
    pub classes: Vec<SynthClass>,
    pub mask_noise: MaskNoise,
}

pub fn default_classes() -> Vec<SynthClass> {
    let c = |name: &str, color, shape| SynthClass {
        name: name.into(),
        color,
        shape,
    };
    vec![
        c("road", [96, 96, 96], ShapeFamily::BackgroundPlane),
        c("white_marking", [245, 245, 245], ShapeFamily::Stripe),
        c("yellow_marking", [236, 188, 24], ShapeFamily::ThinBar),
        c("guardrail", [40, 80, 220], ShapeFamily::Blob),
        c("traffic_cone", [250, 110, 20], ShapeFamily::SmallDisc),
    ]
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            n_images: 40,
            image_size: 256,
            classes: default_classes(),
            mask_noise: MaskNoise::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.into()));
        if self.classes.is_empty() || self.classes.len() >= IGNORE_LABEL as usize {
            return bad("need between 1 and 254 classes");
        }
        if self.image_size < 64 {
            return bad("image_size must be at least 64");
        }
        for (i, a) in self.classes.iter().enumerate() {
            if self.classes[..i].iter().any(|b| b.color == a.color) {
                return bad("class colours must be pairwise distinct");
            }
        }
        let planes = self
            .classes
            .iter()
            .filter(|c| c.shape == ShapeFamily::BackgroundPlane)
            .count();
        if planes > 1 {
            return bad("at most one background_plane class");
        }
        if !(0.0..=1.0).contains(&self.mask_noise.split_prob) {
            return bad("split_prob must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}

/// One generated image with its ground truth and proposals.
#[derive(Debug, Clone)]
pub struct SynthImage {
    pub record: ImageRecord,
    pub rgb: RgbImage,
    pub gt: LabelMap,
    pub masks: Vec<MaskRecord>,
    /// True class of every mask.
    pub mask_classes: Vec<u8>,
    /// Number of objects drawn, counting the background plane.
    pub objects: usize,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub images: Vec<SynthImage>,
}

impl SynthDataset {
    pub fn records(&self) -> Vec<ImageRecord> {
        self.images.iter().map(|i| i.record.clone()).collect()
    }

    pub fn masks(&self) -> Vec<MaskRecord> {
        self.images.iter().flat_map(|i| i.masks.iter().cloned()).collect()
    }

    pub fn mask_classes(&self) -> BTreeMap<String, u8> {
        self.images
            .iter()
            .flat_map(|i| i.masks.iter().zip(&i.mask_classes).map(|(m, &c)| (m.mask_id.clone(), c)))
            .collect()
    }

    pub fn object_count(&self) -> usize {
        self.images.iter().map(|i| i.objects).sum()
    }

    /// Layout under `dir`: `manifest.json` (image paths relative to it),
    /// `classes.json`, `mask_classes.json`, `images/`, `gt/`, `masks/`.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        std::fs::create_dir_all(dir.join("images"))?;
        std::fs::create_dir_all(dir.join("gt"))?;
        util::write_json(&dir.join("manifest.json"), &self.records())?;
        util::write_json(&dir.join("classes.json"), &self.config.class_names())?;
        util::write_json(&dir.join("mask_classes.json"), &self.mask_classes())?;
        util::write_json(&dir.join("synth_config.json"), &self.config)?;
        self.images.par_iter().try_for_each(|img| -> Result<(), SynthError> {
            let mut png = Vec::new();
            image::codecs::png::PngEncoder::new(&mut png).write_image(
                img.rgb.as_raw(),
                img.rgb.width(),
                img.rgb.height(),
                image::ExtendedColorType::Rgb8,
            )?;
            util::write_atomic(&dir.join(&img.record.path), &png)?;
            write_label_png(&img.gt, &dir.join("gt").join(format!("{}.png", img.record.image_id)))?;
            Ok(())
        })?;
        write_mask_dir(&dir.join("masks"), &self.records(), &self.masks())?;
        Ok(())
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset, SynthError> {
    cfg.validate()?;
    let images = (0..cfg.n_images)
        .into_par_iter()
        .map(|i| generate_image(cfg, i))
        .collect();
    Ok(SynthDataset {
        config: cfg.clone(),
        images,
    })
}

struct Object {
    class: u8,
    pixels: Bitmask,
    /// split along x (vertical cut) or y
    cut_x: bool,
}

fn draw_shape(rng: &mut ChaCha8Rng, shape: ShapeFamily, size: u32) -> Option<Bitmask> {
    let s = size as f64 / 256.0;
    let sc = |lo: f64, hi: f64, rng: &mut ChaCha8Rng| (rng.random_range(lo..hi) * s).round().max(1.0) as i64;
    let mut m = Bitmask::new(size, size);
    let sz = size as i64;
    let fill = |m: &mut Bitmask, inside: &dyn Fn(i64, i64) -> bool, x0: i64, y0: i64, x1: i64, y1: i64| {
        for y in y0.max(0)..y1.min(sz) {
            for x in x0.max(0)..x1.min(sz) {
                if inside(x, y) {
                    m.set(x as u32, y as u32, true);
                }
            }
        }
    };
    match shape {
        ShapeFamily::BackgroundPlane => return None,
        ShapeFamily::Stripe | ShapeFamily::ThinBar => {
            let (long, short) = if shape == ShapeFamily::Stripe {
                (sc(70.0, 130.0, rng), sc(10.0, 15.0, rng))
            } else {
                (sc(50.0, 100.0, rng), sc(5.0, 7.0, rng))
            };
            let vertical = rng.random_bool(0.5);
            let (w, h) = if vertical { (short, long) } else { (long, short) };
            let x0 = rng.random_range(0..(sz - w).max(1));
            let y0 = rng.random_range(0..(sz - h).max(1));
            fill(&mut m, &|_, _| true, x0, y0, x0 + w, y0 + h);
        }
        ShapeFamily::Blob => {
            let (rx, ry) = (sc(18.0, 30.0, rng), sc(18.0, 30.0, rng));
            let cx = rng.random_range(rx..sz - rx);
            let cy = rng.random_range(ry..sz - ry);
            let (rx2, ry2) = ((rx * rx) as f64, (ry * ry) as f64);
            let inside = |x: i64, y: i64| {
                let (dx, dy) = ((x - cx) as f64, (y - cy) as f64);
                dx * dx / rx2 + dy * dy / ry2 <= 1.0
            };
            fill(&mut m, &inside, cx - rx, cy - ry, cx + rx + 1, cy + ry + 1);
        }
        ShapeFamily::SmallDisc => {
            let r = sc(7.0, 11.0, rng);
            let cx = rng.random_range(r..sz - r);
            let cy = rng.random_range(r..sz - r);
            let inside = |x: i64, y: i64| (x - cx).pow(2) + (y - cy).pow(2) <= r * r;
            fill(&mut m, &inside, cx - r, cy - r, cx + r + 1, cy + r + 1);
        }
    }
    Some(m)
}

fn dilate(m: &Bitmask, r: u32) -> Bitmask {
    if r == 0 {
        return m.clone();
    }
    let (w, h) = (m.width(), m.height());
    let mut out = Bitmask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            if m.get(x, y) {
                for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                    for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                        out.set(xx, yy, true);
                    }
                }
            }
        }
    }
    out
}

fn split(m: &Bitmask, cut_x: bool) -> (Bitmask, Bitmask) {
    let b = m.bbox();
    let mid = if cut_x { (b.x0 + b.x1) / 2 } else { (b.y0 + b.y1) / 2 };
    let mut a = Bitmask::new(m.width(), m.height());
    let mut c = a.clone();
    for y in b.y0..b.y1 {
        for x in b.x0..b.x1 {
            if m.get(x, y) {
                let first = if cut_x { x < mid } else { y < mid };
                if first {
                    a.set(x, y, true);
                } else {
                    c.set(x, y, true);
                }
            }
        }
    }
    (a, c)
}

fn generate_image(cfg: &SynthConfig, index: u32) -> SynthImage {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let size = cfg.image_size;
    let image_id = format!("img_{index:04}");
    let margin = 3 + cfg.mask_noise.dilate_px;

    let background = cfg
        .classes
        .iter()
        .position(|c| c.shape == ShapeFamily::BackgroundPlane);
    let mut occupied = Bitmask::new(size, size);
    let mut objects: Vec<Object> = Vec::new();
    for (ci, class) in cfg.classes.iter().enumerate() {
        if class.shape == ShapeFamily::BackgroundPlane {
            continue;
        }
        let instances = rng.random_range(1..=2);
        for _ in 0..instances {
            for _attempt in 0..100 {
                let Some(shape) = draw_shape(&mut rng, class.shape, size) else {
                    break;
                };
                let halo = dilate(&shape, margin);
                if halo.bits().iter().zip(occupied.bits()).any(|(&a, &b)| a && b) {
                    continue;
                }
                occupied.union_with(&halo);
                let b = shape.bbox();
                objects.push(Object {
                    class: ci as u8,
                    cut_x: b.width() >= b.height(),
                    pixels: shape,
                });
                break;
            }
        }
    }

    let bg_color = background.map_or([0, 0, 0], |b| cfg.classes[b].color);
    let bg_label = background.map_or(IGNORE_LABEL, |b| b as u8);
    let mut rgb = RgbImage::from_pixel(size, size, image::Rgb(bg_color));
    let mut gt = LabelMap::filled(&image_id, size, size, bg_label);
    let mut any_object = Bitmask::new(size, size);
    for o in &objects {
        let color = image::Rgb(cfg.classes[o.class as usize].color);
        for y in 0..size {
            for x in 0..size {
                if o.pixels.get(x, y) {
                    rgb.put_pixel(x, y, color);
                    gt.set(x, y, o.class);
                }
            }
        }
        any_object.union_with(&o.pixels);
    }

    // mask proposals: background plane first, then objects
    let mut proposals: Vec<(Bitmask, u8, bool)> = Vec::new();
    if let Some(b) = background {
        let plane = Bitmask::from_bits(size, size, any_object.bits().iter().map(|&v| !v).collect());
        proposals.push((plane, b as u8, true));
    }
    for o in &objects {
        proposals.push((dilate(&o.pixels, cfg.mask_noise.dilate_px), o.class, o.cut_x));
    }
    let mut masks = Vec::new();
    let mut mask_classes = Vec::new();
    let n_objects = proposals.len();
    for (mask, class, cut_x) in proposals {
        let parts = if rng.random_bool(cfg.mask_noise.split_prob) {
            let (a, b) = split(&mask, cut_x);
            vec![a, b]
        } else {
            vec![mask]
        };
        for part in parts.into_iter().filter(|p| p.area() > 0) {
            let id = format!("{image_id}_m{:02}", masks.len());
            masks.push(MaskRecord::from_bitmask(id, &image_id, &part));
            mask_classes.push(class);
        }
    }

    SynthImage {
        record: ImageRecord {
            image_id: image_id.clone(),
            width: size,
            height: size,
            path: PathBuf::from("images").join(format!("{image_id}.png")),
        },
        rgb,
        gt,
        masks,
        mask_classes,
        objects: n_objects,
    }
}

/// Merge map that sends each cluster to the majority true class of its
/// members (lowest class index on ties). Clusters whose majority share is
/// below `min_purity` are mixed and go to DISCARD; 1.0 keeps only clusters
/// holding a single class.
pub fn oracle_merge(
    model: &ClusterModel,
    mask_classes: &BTreeMap<String, u8>,
    classes: Vec<String>,
    min_purity: f64,
) -> MergeMap {
    let n = model.n_clusters();
    let mut votes = vec![vec![0usize; classes.len()]; n];
    for (region, &cluster) in &model.assignments {
        if let Some(&class) = mask_classes.get(region) {
            votes[cluster as usize][class as usize] += 1;
        }
    }
    let mapping = votes
        .iter()
        .enumerate()
        .map(|(c, v)| {
            let total: usize = v.iter().sum();
            let best = v
                .iter()
                .enumerate()
                .fold(None, |b: Option<(usize, usize)>, (i, &n)| match b {
                    Some((_, bn)) if bn >= n => b,
                    _ if n > 0 => Some((i, n)),
                    _ => b,
                });
            let target = match best {
                Some((i, n)) if n as f64 >= min_purity * total as f64 => MergeTarget::Class(i as u8),
                _ => MergeTarget::Discard,
            };
            (c as u32, target)
        })
        .collect();
    MergeMap {
        classes,
        mapping,
        created_by: "oracle".into(),
        created_at: "1970-01-01T00:00:00Z".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::rasterize;

    fn small(split_prob: f64, dilate_px: u32) -> SynthConfig {
        SynthConfig {
            seed: 3,
            n_images: 4,
            image_size: 128,
            mask_noise: MaskNoise {
                split_prob,
                dilate_px,
            },
            ..Default::default()
        }
    }

    #[test]
    fn clean_masks_reproduce_gt() {
        let ds = generate(&small(0.0, 0)).unwrap();
        for img in &ds.images {
            let pairs: Vec<(&MaskRecord, u8)> = img.masks.iter().zip(img.mask_classes.iter().copied()).collect();
            let label = rasterize(&img.record, &pairs).unwrap();
            assert_eq!(label, img.gt);
            assert_eq!(img.masks.len(), img.objects);
        }
    }

    #[test]
    fn full_split_doubles_masks() {
        let ds = generate(&small(1.0, 0)).unwrap();
        let masks: usize = ds.images.iter().map(|i| i.masks.len()).sum();
        assert_eq!(masks, 2 * ds.object_count());
    }

    #[test]
    fn dilation_stays_within_radius() {
        let ds = generate(&small(0.5, 2)).unwrap();
        for img in &ds.images {
            for (m, &c) in img.masks.iter().zip(&img.mask_classes) {
                let bits = m.decode(&img.record).unwrap();
                // every mask pixel is within 2 px (Chebyshev) of a pixel of its class
                for y in 0..img.record.height {
                    for x in 0..img.record.width {
                        if bits.get(x, y) {
                            let near = (y.saturating_sub(2)..(y + 3).min(img.record.height)).any(|yy| {
                                (x.saturating_sub(2)..(x + 3).min(img.record.width)).any(|xx| img.gt.get(xx, yy) == c)
                            });
                            assert!(near);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn same_seed_same_output() {
        let a = generate(&small(0.3, 1)).unwrap();
        let b = generate(&small(0.3, 1)).unwrap();
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.rgb, y.rgb);
            assert_eq!(x.gt, y.gt);
            assert_eq!(x.masks, y.masks);
        }
    }

    #[test]
    fn duplicate_colours_rejected() {
        let mut cfg = small(0.0, 0);
        cfg.classes[2].color = cfg.classes[1].color;
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn mixed_clusters_discarded_at_full_purity() {
        let model = ClusterModel {
            assignments: [("a", 0), ("b", 0), ("c", 0), ("d", 1), ("e", 1)]
                .into_iter()
                .map(|(r, c)| (r.to_string(), c))
                .collect(),
            centroids: vec![vec![0.0], vec![1.0]],
            config: Default::default(),
            inertia: 0.0,
            exemplars: BTreeMap::new(),
        };
        let truth: BTreeMap<String, u8> = [("a", 2), ("b", 2), ("c", 1), ("d", 0), ("e", 0)]
            .into_iter()
            .map(|(r, c)| (r.to_string(), c))
            .collect();
        let names = vec!["x".to_string(), "y".into(), "z".into()];
        let strict = oracle_merge(&model, &truth, names.clone(), 1.0);
        assert_eq!(strict.mapping[&0], MergeTarget::Discard);
        assert_eq!(strict.mapping[&1], MergeTarget::Class(0));
        let majority = oracle_merge(&model, &truth, names.clone(), 0.0);
        assert_eq!(majority.mapping[&0], MergeTarget::Class(2));
        assert_eq!(oracle_merge(&model, &truth, names, 0.6).mapping[&0], MergeTarget::Class(2));
    }
}
