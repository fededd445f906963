//! Mask proposals: RLE codec, ingest validation, area filtering, coverage
//! statistics and region cropping.
//!
//! Masks are stored as row-major run lengths that alternate background and
//! foreground, always starting with a background run (which may be empty).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util;

/// Area threshold below which proposals are treated as noise.
pub const DEFAULT_AREA_THRESHOLD: u32 = 3000;

/// Side length of the square crops handed to feature extractors.
pub const DEFAULT_CROP_SIZE: u32 = 224;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("run lengths sum to {actual}, expected {expected} pixels")]
    LengthMismatch { expected: u64, actual: u64 },
    #[error("mask {mask_id}: stored area {stored} but raster has {actual} foreground pixels")]
    AreaMismatch {
        mask_id: String,
        stored: u32,
        actual: u32,
    },
    #[error("mask {mask_id}: stored bbox {stored:?} but raster bound is {actual:?}")]
    BBoxMismatch {
        mask_id: String,
        stored: BBox,
        actual: BBox,
    },
    #[error("mask {mask_id} references unknown image {image_id}")]
    UnknownImage { mask_id: String, image_id: String },
    #[error("duplicate image id {0}")]
    DuplicateImage(String),
    #[error("duplicate mask id {0}")]
    DuplicateMask(String),
    #[error("image {0} has zero width or height")]
    EmptyImage(String),
    #[error("mask {0} is empty")]
    EmptyMask(String),
    #[error("mask file for {file} lists image {found}")]
    ForeignMaskFile { file: String, found: String },
    #[error("image {image_id} is {actual_w}x{actual_h}, manifest says {width}x{height}")]
    ImageSize {
        image_id: String,
        width: u32,
        height: u32,
        actual_w: u32,
        actual_h: u32,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

/// One entry of the dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub path: PathBuf,
}

impl ImageRecord {
    pub fn pixel_count(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    pub fn load_rgb(&self) -> Result<RgbImage, MaskError> {
        let img = image::open(&self.path)?.to_rgb8();
        if img.width() != self.width || img.height() != self.height {
            return Err(MaskError::ImageSize {
                image_id: self.image_id.clone(),
                width: self.width,
                height: self.height,
                actual_w: img.width(),
                actual_h: img.height(),
            });
        }
        Ok(img)
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`, serialized as a
/// four-element array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl From<[u32; 4]> for BBox {
    fn from([x0, y0, x1, y1]: [u32; 4]) -> Self {
        BBox { x0, y0, x1, y1 }
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub const EMPTY: BBox = BBox {
        x0: 0,
        y0: 0,
        x1: 0,
        y1: 0,
    };

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    pub fn is_empty(&self) -> bool {
        self.width() == 0 || self.height() == 0
    }
}

/// Row-major boolean raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Bitmask {
    pub fn new(width: u32, height: u32) -> Self {
        Bitmask {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width as usize * height as usize);
        Bitmask {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = value;
    }

    pub fn area(&self) -> u32 {
        self.bits.iter().filter(|&&b| b).count() as u32
    }

    /// Tight bound of the foreground; [`BBox::EMPTY`] when there is none.
    pub fn bbox(&self) -> BBox {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        let w = self.width as usize;
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            let (x, y) = ((i % w) as u32, (i / w) as u32);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
        if x0 == u32::MAX {
            BBox::EMPTY
        } else {
            BBox { x0, y0, x1, y1 }
        }
    }

    pub fn union_with(&mut self, other: &Bitmask) {
        assert_eq!(self.bits.len(), other.bits.len());
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }
}

pub fn rle_decode(counts: &[u32], width: u32, height: u32) -> Result<Bitmask, MaskError> {
    let expected = width as u64 * height as u64;
    let actual: u64 = counts.iter().map(|&c| c as u64).sum();
    if actual != expected {
        return Err(MaskError::LengthMismatch { expected, actual });
    }
    let mut bits = Vec::with_capacity(expected as usize);
    for (i, &run) in counts.iter().enumerate() {
        let fg = i % 2 == 1;
        bits.extend(std::iter::repeat_n(fg, run as usize));
    }
    Ok(Bitmask {
        width,
        height,
        bits,
    })
}

/// Encode a raster. Only the first count can be zero (foreground-first masks).
pub fn rle_encode(mask: &Bitmask) -> Vec<u32> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for &b in &mask.bits {
        if b != current {
            counts.push(run);
            run = 0;
            current = b;
        }
        run += 1;
    }
    if run > 0 || counts.is_empty() {
        counts.push(run);
    }
    counts
}

/// Foreground pixel count straight from the run lengths.
pub fn rle_area(counts: &[u32]) -> u64 {
    counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
}

/// One object-mask proposal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub mask_id: String,
    pub image_id: String,
    pub rle: Vec<u32>,
    pub area: u32,
    pub bbox: BBox,
}

impl MaskRecord {
    pub fn from_bitmask(mask_id: impl Into<String>, image_id: impl Into<String>, mask: &Bitmask) -> Self {
        MaskRecord {
            mask_id: mask_id.into(),
            image_id: image_id.into(),
            rle: rle_encode(mask),
            area: mask.area(),
            bbox: mask.bbox(),
        }
    }

    pub fn decode(&self, image: &ImageRecord) -> Result<Bitmask, MaskError> {
        rle_decode(&self.rle, image.width, image.height)
    }

    /// Decode and check the stored area and bbox against the raster.
    pub fn validate(&self, image: &ImageRecord) -> Result<Bitmask, MaskError> {
        if self.image_id != image.image_id {
            return Err(MaskError::UnknownImage {
                mask_id: self.mask_id.clone(),
                image_id: self.image_id.clone(),
            });
        }
        let raster = self.decode(image)?;
        let area = raster.area();
        if area != self.area {
            return Err(MaskError::AreaMismatch {
                mask_id: self.mask_id.clone(),
                stored: self.area,
                actual: area,
            });
        }
        let bbox = raster.bbox();
        if bbox != self.bbox {
            return Err(MaskError::BBoxMismatch {
                mask_id: self.mask_id.clone(),
                stored: self.bbox,
                actual: bbox,
            });
        }
        Ok(raster)
    }
}

/// A mask as it appears inside a per-image mask file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub mask_id: String,
    pub rle: Vec<u32>,
    pub area: u32,
    pub bbox: BBox,
}

/// On-disk mask file: all proposals for a single image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskFile {
    pub image_id: String,
    pub masks: Vec<MaskEntry>,
}

impl MaskFile {
    pub fn into_records(self) -> Vec<MaskRecord> {
        let image_id = self.image_id;
        self.masks
            .into_iter()
            .map(|m| MaskRecord {
                mask_id: m.mask_id,
                image_id: image_id.clone(),
                rle: m.rle,
                area: m.area,
                bbox: m.bbox,
            })
            .collect()
    }

    pub fn from_records(image_id: &str, masks: &[MaskRecord]) -> Self {
        MaskFile {
            image_id: image_id.to_string(),
            masks: masks
                .iter()
                .filter(|m| m.image_id == image_id)
                .map(|m| MaskEntry {
                    mask_id: m.mask_id.clone(),
                    rle: m.rle.clone(),
                    area: m.area,
                    bbox: m.bbox,
                })
                .collect(),
        }
    }
}

/// Read a manifest, resolving relative image paths against its directory.
pub fn load_manifest(path: &Path) -> Result<Vec<ImageRecord>, MaskError> {
    let mut images: Vec<ImageRecord> = util::read_json(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut seen = HashSet::new();
    for img in &mut images {
        if !seen.insert(img.image_id.clone()) {
            return Err(MaskError::DuplicateImage(img.image_id.clone()));
        }
        if img.width == 0 || img.height == 0 {
            return Err(MaskError::EmptyImage(img.image_id.clone()));
        }
        if img.path.is_relative() {
            img.path = base.join(&img.path);
        }
    }
    Ok(images)
}

/// Load `{image_id}.json` for every image in the manifest. Images without a
/// mask file simply have no proposals.
pub fn load_mask_dir(dir: &Path, images: &[ImageRecord]) -> Result<Vec<MaskRecord>, MaskError> {
    let mut out = Vec::new();
    for img in images {
        let path = dir.join(format!("{}.json", img.image_id));
        if !path.exists() {
            continue;
        }
        let file: MaskFile = util::read_json(&path)?;
        if file.image_id != img.image_id {
            return Err(MaskError::ForeignMaskFile {
                file: img.image_id.clone(),
                found: file.image_id,
            });
        }
        out.extend(file.into_records());
    }
    Ok(out)
}

pub fn write_mask_dir(dir: &Path, images: &[ImageRecord], masks: &[MaskRecord]) -> Result<(), MaskError> {
    std::fs::create_dir_all(dir)?;
    for img in images {
        let file = MaskFile::from_records(&img.image_id, masks);
        util::write_json(&dir.join(format!("{}.json", img.image_id)), &file)?;
    }
    Ok(())
}

/// Result of validating every mask of a dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub images: usize,
    pub masks: usize,
    pub errors: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

pub fn validate_all(images: &[ImageRecord], masks: &[MaskRecord]) -> ValidationReport {
    let index: HashMap<&str, &ImageRecord> =
        images.iter().map(|i| (i.image_id.as_str(), i)).collect();
    let mut errors = Vec::new();
    let mut seen = HashSet::new();
    for m in masks {
        if !seen.insert(m.mask_id.as_str()) {
            errors.push(MaskError::DuplicateMask(m.mask_id.clone()).to_string());
            continue;
        }
        let result = match index.get(m.image_id.as_str()) {
            Some(img) => m.validate(img).map(|_| ()),
            None => Err(MaskError::UnknownImage {
                mask_id: m.mask_id.clone(),
                image_id: m.image_id.clone(),
            }),
        };
        if let Err(e) = result {
            errors.push(e.to_string());
        }
    }
    ValidationReport {
        images: images.len(),
        masks: masks.len(),
        errors,
    }
}

/// Split masks into those with `area > theta` and the rest, keeping order.
pub fn filter_by_area(masks: Vec<MaskRecord>, theta: u32) -> (Vec<MaskRecord>, Vec<MaskRecord>) {
    masks.into_iter().partition(|m| m.area > theta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub per_image: BTreeMap<String, f64>,
    pub dataset_mean: f64,
    pub theta: u32,
    pub mask_count_total: u64,
    pub mask_count_below_threshold: u64,
    pub mask_count_at_or_above_threshold: u64,
}

/// Percent of each image covered by the union of its masks, plus the
/// small/large mask census at `theta`.
pub fn compute_coverage(
    images: &[ImageRecord],
    masks: &[MaskRecord],
    theta: u32,
) -> Result<CoverageReport, MaskError> {
    let index: HashMap<&str, usize> = images
        .iter()
        .enumerate()
        .map(|(i, img)| (img.image_id.as_str(), i))
        .collect();
    let mut by_image: Vec<Vec<&MaskRecord>> = vec![Vec::new(); images.len()];
    let mut below = 0u64;
    for m in masks {
        let &i = index
            .get(m.image_id.as_str())
            .ok_or_else(|| MaskError::UnknownImage {
                mask_id: m.mask_id.clone(),
                image_id: m.image_id.clone(),
            })?;
        by_image[i].push(m);
        if m.area < theta {
            below += 1;
        }
    }

    use rayon::prelude::*;
    let coverage: Vec<f64> = images
        .par_iter()
        .zip(by_image.par_iter())
        .map(|(img, masks)| -> Result<f64, MaskError> {
            let mut union = Bitmask::new(img.width, img.height);
            for m in masks {
                union.union_with(&m.decode(img)?);
            }
            Ok(union.area() as f64 / img.pixel_count() as f64 * 100.0)
        })
        .collect::<Result<_, _>>()?;

    let dataset_mean = if images.is_empty() {
        0.0
    } else {
        coverage.iter().sum::<f64>() / images.len() as f64
    };
    let total = masks.len() as u64;
    Ok(CoverageReport {
        per_image: images
            .iter()
            .map(|i| i.image_id.clone())
            .zip(coverage)
            .collect(),
        dataset_mean,
        theta,
        mask_count_total: total,
        mask_count_below_threshold: below,
        mask_count_at_or_above_threshold: total - below,
    })
}

/// Crop the mask's bounding box out of `image` and resize it to
/// `out_size x out_size` with corner-aligned bilinear sampling. Background
/// pixels inside the box are kept.
pub fn crop_region(image: &RgbImage, mask: &MaskRecord, out_size: u32) -> Result<RgbImage, MaskError> {
    if mask.area == 0 || mask.bbox.is_empty() {
        return Err(MaskError::EmptyMask(mask.mask_id.clone()));
    }
    let b = mask.bbox;
    let b = BBox {
        x0: b.x0.min(image.width()),
        y0: b.y0.min(image.height()),
        x1: b.x1.min(image.width()),
        y1: b.y1.min(image.height()),
    };
    if b.is_empty() {
        return Err(MaskError::EmptyMask(mask.mask_id.clone()));
    }
    Ok(resize_bilinear(image, b, out_size, out_size))
}

/// Corner-aligned bilinear resize of the `region` of `src`: output corners
/// sample source corners exactly.
pub fn resize_bilinear(src: &RgbImage, region: BBox, out_w: u32, out_h: u32) -> RgbImage {
    let (rw, rh) = (region.width(), region.height());
    let scale = |src_len: u32, out_len: u32| {
        if out_len > 1 {
            (src_len - 1) as f64 / (out_len - 1) as f64
        } else {
            0.0
        }
    };
    let (sx, sy) = (scale(rw, out_w), scale(rh, out_h));
    let mut out = RgbImage::new(out_w, out_h);
    for oy in 0..out_h {
        let fy = oy as f64 * sy;
        let y0 = (fy.floor() as u32).min(rh - 1);
        let y1 = (y0 + 1).min(rh - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ox as f64 * sx;
            let x0 = (fx.floor() as u32).min(rw - 1);
            let x1 = (x0 + 1).min(rw - 1);
            let tx = fx - x0 as f64;
            let p = |x: u32, y: u32| src.get_pixel(region.x0 + x, region.y0 + y).0;
            let (p00, p10, p01, p11) = (p(x0, y0), p(x1, y0), p(x0, y1), p(x1, y1));
            let mut px = [0u8; 3];
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - tx) + p10[c] as f64 * tx;
                let bot = p01[c] as f64 * (1.0 - tx) + p11[c] as f64 * tx;
                let v = top * (1.0 - ty) + bot * ty;
                px[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(ox, oy, image::Rgb(px));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str, area: u32) -> MaskRecord {
        MaskRecord {
            mask_id: id.into(),
            image_id: "img".into(),
            rle: vec![],
            area,
            bbox: BBox::EMPTY,
        }
    }

    fn image(w: u32, h: u32) -> ImageRecord {
        ImageRecord {
            image_id: "img".into(),
            width: w,
            height: h,
            path: PathBuf::new(),
        }
    }

    #[test]
    fn decode_examples() {
        let m = rle_decode(&[3, 2, 3], 4, 2).unwrap();
        let fg: Vec<usize> = (0..8).filter(|&i| m.bits()[i]).collect();
        assert_eq!(fg, vec![3, 4]);

        let m = rle_decode(&[0, 8], 4, 2).unwrap();
        assert_eq!(m.area(), 8);

        let m = rle_decode(&[8], 4, 2).unwrap();
        assert_eq!(m.area(), 0);
        assert_eq!(m.bbox(), BBox::EMPTY);
    }

    #[test]
    fn decode_length_mismatch() {
        assert!(matches!(
            rle_decode(&[3, 2], 4, 2),
            Err(MaskError::LengthMismatch {
                expected: 8,
                actual: 5
            })
        ));
    }

    #[test]
    fn encode_examples() {
        assert_eq!(rle_encode(&Bitmask::new(2, 2)), vec![4]);
        let m = Bitmask::from_bits(4, 1, vec![true, true, false, false]);
        assert_eq!(rle_encode(&m), vec![0, 2, 2]);
    }

    proptest! {
        #[test]
        fn rle_round_trip(w in 1u32..20, h in 1u32..20, seed in any::<u64>()) {
            use rand::Rng;
            let mut r = util::rng(seed);
            let bits: Vec<bool> = (0..w * h).map(|_| r.random_bool(0.4)).collect();
            let m = Bitmask::from_bits(w, h, bits);
            let counts = rle_encode(&m);
            prop_assert!(counts.iter().skip(1).all(|&c| c > 0));
            prop_assert_eq!(rle_area(&counts), m.area() as u64);
            prop_assert_eq!(rle_decode(&counts, w, h).unwrap(), m);
        }
    }

    #[test]
    fn bbox_is_tight() {
        let mut m = Bitmask::new(5, 4);
        m.set(1, 2, true);
        m.set(3, 1, true);
        assert_eq!(m.bbox(), BBox { x0: 1, y0: 1, x1: 4, y1: 3 });
    }

    #[test]
    fn validate_catches_bad_area_and_bbox() {
        let img = image(4, 2);
        let mut r = MaskRecord::from_bitmask("a", "img", &rle_decode(&[3, 2, 3], 4, 2).unwrap());
        // pixel 3 is (3,0), pixel 4 is (0,1)
        assert_eq!(r.bbox, BBox { x0: 0, y0: 0, x1: 4, y1: 2 });
        r.validate(&img).unwrap();
        r.area = 3;
        assert!(matches!(r.validate(&img), Err(MaskError::AreaMismatch { .. })));
        r.area = 2;
        r.bbox = BBox::EMPTY;
        assert!(matches!(r.validate(&img), Err(MaskError::BBoxMismatch { .. })));
    }

    #[test]
    fn area_filter_is_strict() {
        let masks = vec![rec("a", 2999), rec("b", 3000), rec("c", 3001)];
        let (kept, dropped) = filter_by_area(masks, DEFAULT_AREA_THRESHOLD);
        assert_eq!(kept.iter().map(|m| m.area).collect::<Vec<_>>(), vec![3001]);
        assert_eq!(dropped.iter().map(|m| m.area).collect::<Vec<_>>(), vec![2999, 3000]);

        let (kept, dropped) = filter_by_area(vec![rec("a", 1), rec("b", 7)], 0);
        assert_eq!((kept.len(), dropped.len()), (2, 0));

        let (kept, dropped) = filter_by_area(vec![], 10);
        assert!(kept.is_empty() && dropped.is_empty());
    }

    fn half_mask(id: &str) -> MaskRecord {
        let mut m = Bitmask::new(100, 100);
        for y in 0..50 {
            for x in 0..100 {
                m.set(x, y, true);
            }
        }
        MaskRecord::from_bitmask(id, "img", &m)
    }

    #[test]
    fn coverage_is_a_union() {
        let images = vec![image(100, 100)];
        let r = compute_coverage(&images, &[half_mask("a")], 3000).unwrap();
        assert_eq!(r.per_image["img"], 50.0);
        let r = compute_coverage(&images, &[half_mask("a"), half_mask("b")], 3000).unwrap();
        assert_eq!(r.per_image["img"], 50.0);
        assert_eq!(r.dataset_mean, 50.0);
        assert_eq!(r.mask_count_total, 2);
        assert_eq!(r.mask_count_at_or_above_threshold, 2);
    }

    #[test]
    fn coverage_rejects_dangling_image() {
        let mut m = half_mask("a");
        m.image_id = "nope".into();
        assert!(matches!(
            compute_coverage(&[image(100, 100)], &[m], 0),
            Err(MaskError::UnknownImage { .. })
        ));
    }

    #[test]
    fn coverage_of_maskless_image_is_zero() {
        let r = compute_coverage(&[image(3, 3)], &[], 0).unwrap();
        assert_eq!(r.per_image["img"], 0.0);
    }

    fn gradient_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 20) as u8, (y * 30) as u8, (x + y) as u8]))
    }

    fn full_mask(w: u32, h: u32, bbox: BBox) -> MaskRecord {
        let mut m = Bitmask::new(w, h);
        for y in bbox.y0..bbox.y1 {
            for x in bbox.x0..bbox.x1 {
                m.set(x, y, true);
            }
        }
        MaskRecord::from_bitmask("m", "img", &m)
    }

    #[test]
    fn crop_full_image_same_size_is_identity() {
        let img = gradient_image(6, 5);
        let mask = full_mask(6, 5, BBox { x0: 0, y0: 0, x1: 6, y1: 5 });
        let out = resize_bilinear(&img, mask.bbox, 6, 5);
        assert_eq!(out, img);
        let sq = gradient_image(7, 7);
        let out = crop_region(&sq, &full_mask(7, 7, BBox { x0: 0, y0: 0, x1: 7, y1: 7 }), 7).unwrap();
        assert_eq!(out, sq);
    }

    #[test]
    fn crop_upscale_keeps_corners() {
        let img = gradient_image(6, 6);
        let b = BBox { x0: 2, y0: 3, x1: 4, y1: 5 };
        let out = crop_region(&img, &full_mask(6, 6, b), 4).unwrap();
        assert_eq!(out.get_pixel(0, 0), img.get_pixel(2, 3));
        assert_eq!(out.get_pixel(3, 0), img.get_pixel(3, 3));
        assert_eq!(out.get_pixel(0, 3), img.get_pixel(2, 4));
        assert_eq!(out.get_pixel(3, 3), img.get_pixel(3, 4));
    }

    #[test]
    fn crop_constant_region_is_constant() {
        let img = RgbImage::from_pixel(10, 10, image::Rgb([12, 200, 77]));
        let out = crop_region(&img, &full_mask(10, 10, BBox { x0: 1, y0: 1, x1: 9, y1: 9 }), 3).unwrap();
        assert!(out.pixels().all(|p| p.0 == [12, 200, 77]));
    }

    #[test]
    fn crop_empty_mask_fails() {
        let img = gradient_image(4, 4);
        let m = MaskRecord::from_bitmask("e", "img", &Bitmask::new(4, 4));
        assert!(matches!(crop_region(&img, &m, 8), Err(MaskError::EmptyMask(_))));
    }
}
