//! Confusion-matrix based segmentation metrics.
//!
//! Rows are ground truth, columns are predictions. One extra column counts
//! valid ground-truth pixels the prediction left unlabeled, so pseudo-labels
//! with holes can be scored: those pixels are false negatives for their
//! ground-truth class and never count as correct.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labeling::{self, LabelError, LabelMap, IGNORE_LABEL};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{image_id}: ground truth is {gt_w}x{gt_h}, prediction is {pred_w}x{pred_h}")]
    ShapeMismatch {
        image_id: String,
        gt_w: u32,
        gt_h: u32,
        pred_w: u32,
        pred_h: u32,
    },
    #[error("{image_id}: label {label} out of range for {n_classes} classes")]
    LabelOutOfRange {
        image_id: String,
        label: u8,
        n_classes: u32,
    },
    #[error("confusion matrix has no valid pixels")]
    EmptyMatrix,
    #[error("matrices have {0} and {1} classes")]
    ClassCountMismatch(u32, u32),
    #[error("no prediction for {0}")]
    MissingPrediction(String),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n_classes: u32,
    /// `n_classes x (n_classes + 1)`, row-major; the last column holds
    /// unlabeled predictions.
    pub counts: Vec<u64>,
    pub ignored_pixels: u64,
}

impl ConfusionMatrix {
    pub fn new(n_classes: u32) -> Self {
        let n = n_classes as usize;
        ConfusionMatrix {
            n_classes,
            counts: vec![0; n * (n + 1)],
            ignored_pixels: 0,
        }
    }

    #[inline]
    fn cols(&self) -> usize {
        self.n_classes as usize + 1
    }

    /// `counts[gt][pred]`; `pred == n_classes` is the unlabeled column.
    #[inline]
    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.cols() + pred]
    }

    pub fn accumulate(&mut self, gt: &LabelMap, pred: &LabelMap) -> Result<(), MetricsError> {
        if gt.width != pred.width || gt.height != pred.height {
            return Err(MetricsError::ShapeMismatch {
                image_id: gt.image_id.clone(),
                gt_w: gt.width,
                gt_h: gt.height,
                pred_w: pred.width,
                pred_h: pred.height,
            });
        }
        let n = self.n_classes;
        let out_of_range = |map: &LabelMap, v: u8| MetricsError::LabelOutOfRange {
            image_id: map.image_id.clone(),
            label: v,
            n_classes: n,
        };
        // validate first so a bad map leaves the matrix untouched
        for (&g, &p) in gt.data.iter().zip(&pred.data) {
            if g != IGNORE_LABEL && g as u32 >= n {
                return Err(out_of_range(gt, g));
            }
            if p != IGNORE_LABEL && p as u32 >= n {
                return Err(out_of_range(pred, p));
            }
        }
        let cols = self.cols();
        for (&g, &p) in gt.data.iter().zip(&pred.data) {
            if g == IGNORE_LABEL {
                self.ignored_pixels += 1;
                continue;
            }
            let p = if p == IGNORE_LABEL { n as usize } else { p as usize };
            self.counts[g as usize * cols + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), MetricsError> {
        if other.n_classes != self.n_classes {
            return Err(MetricsError::ClassCountMismatch(self.n_classes, other.n_classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored_pixels += other.ignored_pixels;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `(TP, FP, FN)` for class `c`.
    pub fn tp_fp_fn(&self, c: usize) -> (u64, u64, u64) {
        let n = self.n_classes as usize;
        let tp = self.get(c, c);
        let fp = (0..n).filter(|&g| g != c).map(|g| self.get(g, c)).sum();
        let fn_ = (0..=n).filter(|&p| p != c).map(|p| self.get(c, p)).sum();
        (tp, fp, fn_)
    }

    /// IoU in percent, `None` when the class is absent from both ground
    /// truth and prediction.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let (tp, fp, fn_) = self.tp_fp_fn(c);
        let denom = tp + fp + fn_;
        (denom > 0).then(|| 100.0 * tp as f64 / denom as f64)
    }

    /// Correct pixels over valid ground-truth pixels, in percent.
    pub fn pixel_accuracy(&self) -> Result<f64, MetricsError> {
        let total = self.total();
        if total == 0 {
            return Err(MetricsError::EmptyMatrix);
        }
        let trace: u64 = (0..self.n_classes as usize).map(|c| self.get(c, c)).sum();
        Ok(100.0 * trace as f64 / total as f64)
    }

    /// One-vs-rest `(TP + TN) / total` for class `c`, in percent.
    pub fn class_accuracy(&self, c: usize) -> Result<f64, MetricsError> {
        let total = self.total();
        if total == 0 {
            return Err(MetricsError::EmptyMatrix);
        }
        let (tp, fp, fn_) = self.tp_fp_fn(c);
        let tn = total - tp - fp - fn_;
        Ok(100.0 * (tp + tn) as f64 / total as f64)
    }

    pub fn report(&self) -> Result<MetricsReport, MetricsError> {
        let n = self.n_classes as usize;
        let per_class_iou: Vec<Option<f64>> = (0..n).map(|c| self.iou(c)).collect();
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        Ok(MetricsReport {
            per_class_presence: per_class_iou.iter().map(Option::is_some).collect(),
            per_class_accuracy: (0..n).map(|c| self.class_accuracy(c)).collect::<Result<_, _>>()?,
            pixel_accuracy: self.pixel_accuracy()?,
            miou,
            per_class_iou,
        })
    }
}

/// All values are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `null` for classes absent from both ground truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub per_class_presence: Vec<bool>,
    pub per_class_accuracy: Vec<f64>,
}

/// Score every ground-truth PNG in `gt_dir` against the same-named PNG in
/// `pred_dir`. Images are accumulated in parallel and merged by addition.
pub fn evaluate_dirs(gt_dir: &Path, pred_dir: &Path, n_classes: u32) -> Result<ConfusionMatrix, MetricsError> {
    use rayon::prelude::*;
    let files = crate::util::list_files(gt_dir, "png")?;
    let partial: Vec<ConfusionMatrix> = files
        .par_iter()
        .map(|(stem, gt_path)| {
            let pred_path = pred_dir.join(format!("{stem}.png"));
            if !pred_path.exists() {
                return Err(MetricsError::MissingPrediction(stem.clone()));
            }
            let gt = labeling::read_label_png(gt_path)?;
            let pred = labeling::read_label_png(&pred_path)?;
            let mut conf = ConfusionMatrix::new(n_classes);
            conf.accumulate(&gt, &pred)?;
            Ok(conf)
        })
        .collect::<Result<_, _>>()?;
    let mut total = ConfusionMatrix::new(n_classes);
    for c in &partial {
        total.merge(c)?;
    }
    Ok(total)
}
