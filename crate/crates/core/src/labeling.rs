//! Cluster merging and pseudo-label rasterization.
//!
//! Over-clustering leaves many fine-grained clusters; a [`MergeMap`] folds
//! each of them into a semantic class or discards it. [`rasterize`] then
//! burns the surviving masks into a per-image [`LabelMap`].

use std::collections::BTreeMap;
use std::fmt;
use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageEncoder};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::clustering::ClusterModel;
use crate::masks::{ImageRecord, MaskError, MaskRecord};

/// Pixel value for unlabeled / ignored pixels.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("clusters without a mapping: {0:?}")]
    UnmappedCluster(Vec<u32>),
    #[error("mapping lists clusters the model does not have: {0:?}")]
    UnknownCluster(Vec<u32>),
    #[error("cluster {cluster} maps to class {class}, but only {n_classes} classes exist")]
    ClassOutOfRange {
        cluster: u32,
        class: u8,
        n_classes: usize,
    },
    #[error("at most 255 classes are supported, got {0}")]
    TooManyClasses(usize),
    #[error("mask {mask_id} belongs to {found}, not {expected}")]
    ForeignMask {
        mask_id: String,
        expected: String,
        found: String,
    },
    #[error("{0}: expected an 8-bit single-channel PNG")]
    BadDepth(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where a cluster goes after merging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MergeTarget {
    Class(u8),
    Discard,
}

impl MergeTarget {
    pub fn class(self) -> Option<u8> {
        match self {
            MergeTarget::Class(c) => Some(c),
            MergeTarget::Discard => None,
        }
    }
}

impl fmt::Display for MergeTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MergeTarget::Class(c) => write!(f, "{c}"),
            MergeTarget::Discard => f.write_str("DISCARD"),
        }
    }
}

// JSON form: a class index, or the string "DISCARD".
impl Serialize for MergeTarget {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            MergeTarget::Class(c) => s.serialize_u8(*c),
            MergeTarget::Discard => s.serialize_str("DISCARD"),
        }
    }
}

impl<'de> Deserialize<'de> for MergeTarget {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Class(u8),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Class(c) => Ok(MergeTarget::Class(c)),
            Raw::Word(w) if w == "DISCARD" => Ok(MergeTarget::Discard),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "expected a class index or \"DISCARD\", got {w:?}"
            ))),
        }
    }
}

/// Human (or scripted) cluster-to-class decisions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeMap {
    pub classes: Vec<String>,
    pub mapping: BTreeMap<u32, MergeTarget>,
    #[serde(default)]
    pub created_by: String,
    /// RFC 3339 timestamp.
    #[serde(default)]
    pub created_at: String,
}

impl MergeMap {
    /// Every cluster of `model` mapped to DISCARD.
    pub fn discard_all(model: &ClusterModel, classes: Vec<String>) -> Self {
        MergeMap {
            classes,
            mapping: model.cluster_ids().map(|c| (c, MergeTarget::Discard)).collect(),
            created_by: String::new(),
            created_at: String::new(),
        }
    }

    /// Check coverage of the model's clusters and class-index ranges.
    pub fn validate_for(&self, model: &ClusterModel) -> Result<(), LabelError> {
        if self.classes.len() > IGNORE_LABEL as usize {
            return Err(LabelError::TooManyClasses(self.classes.len()));
        }
        let n = model.n_clusters() as u32;
        let missing: Vec<u32> = (0..n).filter(|c| !self.mapping.contains_key(c)).collect();
        if !missing.is_empty() {
            return Err(LabelError::UnmappedCluster(missing));
        }
        let extra: Vec<u32> = self.mapping.keys().copied().filter(|&c| c >= n).collect();
        if !extra.is_empty() {
            return Err(LabelError::UnknownCluster(extra));
        }
        for (&cluster, target) in &self.mapping {
            if let MergeTarget::Class(class) = *target {
                if class as usize >= self.classes.len() {
                    return Err(LabelError::ClassOutOfRange {
                        cluster,
                        class,
                        n_classes: self.classes.len(),
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn read_merge_map(path: &Path) -> Result<MergeMap, LabelError> {
    Ok(crate::util::read_json(path)?)
}

/// Atomic write (temp file and rename).
pub fn write_merge_map(merge: &MergeMap, path: &Path) -> Result<(), LabelError> {
    Ok(crate::util::write_json(path, merge)?)
}

/// Relabel every region through the merge map; discarded regions map to `None`.
pub fn apply_merge(
    model: &ClusterModel,
    merge: &MergeMap,
) -> Result<BTreeMap<String, Option<u8>>, LabelError> {
    merge.validate_for(model)?;
    Ok(model
        .assignments
        .iter()
        .map(|(region, cluster)| (region.clone(), merge.mapping[cluster].class()))
        .collect())
}

/// Per-pixel class raster; [`IGNORE_LABEL`] marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(image_id: impl Into<String>, width: u32, height: u32, value: u8) -> Self {
        LabelMap {
            image_id: image_id.into(),
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        self.data[y as usize * self.width as usize + x as usize] = v;
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>, LabelError> {
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out).write_image(
            &self.data,
            self.width,
            self.height,
            image::ExtendedColorType::L8,
        )?;
        Ok(out)
    }

    pub fn from_png_bytes(image_id: impl Into<String>, bytes: &[u8]) -> Result<Self, LabelError> {
        let image_id = image_id.into();
        let img = image::ImageReader::new(Cursor::new(bytes))
            .with_guessed_format()?
            .decode()?;
        match img {
            DynamicImage::ImageLuma8(buf) => Ok(LabelMap {
                image_id,
                width: buf.width(),
                height: buf.height(),
                data: buf.into_raw(),
            }),
            _ => Err(LabelError::BadDepth(image_id)),
        }
    }
}

pub fn write_label_png(label: &LabelMap, path: &Path) -> Result<(), LabelError> {
    crate::util::write_atomic(path, &label.to_png_bytes()?)?;
    Ok(())
}

/// Read a label PNG; the image id is the file stem.
pub fn read_label_png(path: &Path) -> Result<LabelMap, LabelError> {
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    LabelMap::from_png_bytes(id, &std::fs::read(path)?)
}

/// Paint labelled masks onto an all-ignore raster, largest first, so smaller
/// masks (markings, cones) end up on top of larger ones (road). Equal areas
/// paint in descending `mask_id` order, so the smaller id wins. The input
/// order does not matter.
pub fn rasterize(image: &ImageRecord, masks: &[(&MaskRecord, u8)]) -> Result<LabelMap, LabelError> {
    for (m, _) in masks {
        if m.image_id != image.image_id {
            return Err(LabelError::ForeignMask {
                mask_id: m.mask_id.clone(),
                expected: image.image_id.clone(),
                found: m.image_id.clone(),
            });
        }
    }
    let mut order: Vec<&(&MaskRecord, u8)> = masks.iter().collect();
    order.sort_by(|a, b| b.0.area.cmp(&a.0.area).then_with(|| b.0.mask_id.cmp(&a.0.mask_id)));

    let mut label = LabelMap::filled(&image.image_id, image.width, image.height, IGNORE_LABEL);
    for (mask, class) in order {
        // walk the runs directly instead of materializing the bitmask
        let expected = image.pixel_count();
        let total: u64 = mask.rle.iter().map(|&c| c as u64).sum();
        if total != expected {
            return Err(MaskError::LengthMismatch {
                expected,
                actual: total,
            }
            .into());
        }
        let mut pos = 0usize;
        for (i, &run) in mask.rle.iter().enumerate() {
            let run = run as usize;
            if i % 2 == 1 {
                label.data[pos..pos + run].fill(*class);
            }
            pos += run;
        }
    }
    Ok(label)
}
