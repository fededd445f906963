//! Iterative teacher/student loop.
//!
//! Iteration 0 is the clustering pseudo-labels themselves. Each further
//! iteration trains a model on the previous labels through an external
//! command, predicts every image, validates the predictions and uses them as
//! the next labels. The loop stops once dev-set mIoU stops improving by at
//! least `plateau_eps` points, or after `max_iters` training rounds.

pub mod toy;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labeling::{read_label_png, LabelError, IGNORE_LABEL};
use crate::masks::{load_manifest, ImageRecord, MaskError};
use crate::metrics::{evaluate_dirs, MetricsError, MetricsReport};
use crate::util;

pub const TOY_TRAINER: &str = "builtin:toy-trainer";
pub const TOY_PREDICTOR: &str = "builtin:toy-predictor";
pub const TRAINER_ENV: &str = "COMRP_TRAINER_CMD";
pub const PREDICTOR_ENV: &str = "COMRP_PREDICTOR_CMD";
pub const LOG_FILE: &str = "loop.jsonl";

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("invalid loop config: {0}")]
    InvalidConfig(String),
    #[error("trainer failed with exit code {code:?}: {stderr_tail}")]
    TrainerFailed { code: Option<i32>, stderr_tail: String },
    #[error("predictor failed with exit code {code:?}: {stderr_tail}")]
    PredictorFailed { code: Option<i32>, stderr_tail: String },
    #[error("bad prediction for {image_id}: {reason}")]
    BadPrediction { image_id: String, reason: String },
    #[error("no initial label for {0}")]
    MissingLabel(String),
    #[error("corrupt loop log: {0}")]
    CorruptLog(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub max_iters: u32,
    /// Minimum mIoU gain, in points, for the loop to continue.
    pub plateau_eps: f64,
    /// Placeholders: `{manifest}`, `{labels}`, `{out}`.
    pub trainer_cmd: String,
    /// Placeholders: `{model}`, `{images}`, `{out}`.
    pub predictor_cmd: String,
    pub dev_gt_dir: Option<PathBuf>,
    pub workdir: PathBuf,
    /// Image manifest of the corpus being relabeled.
    pub manifest: PathBuf,
    pub n_classes: u32,
    pub split_seed: u64,
    pub val_fraction: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            max_iters: 3,
            plateau_eps: 0.1,
            trainer_cmd: TOY_TRAINER.into(),
            predictor_cmd: TOY_PREDICTOR.into(),
            dev_gt_dir: None,
            workdir: PathBuf::from("work"),
            manifest: PathBuf::from("manifest.json"),
            n_classes: 0,
            split_seed: 0,
            val_fraction: 0.0,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), LoopError> {
        let bad = |m: String| Err(LoopError::InvalidConfig(m));
        if self.max_iters < 1 {
            return bad("max_iters must be at least 1".into());
        }
        if self.n_classes == 0 || self.n_classes >= IGNORE_LABEL as u32 {
            return bad(format!("n_classes must lie in 1..255, got {}", self.n_classes));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)".into());
        }
        if !self.plateau_eps.is_finite() {
            return bad("plateau_eps must be finite".into());
        }
        check_template(&self.trainer_cmd, TOY_TRAINER, &["{manifest}", "{labels}", "{out}"])?;
        check_template(&self.predictor_cmd, TOY_PREDICTOR, &["{model}", "{images}", "{out}"])?;
        Ok(())
    }

    /// Apply `COMRP_TRAINER_CMD` / `COMRP_PREDICTOR_CMD` when set.
    pub fn with_env_overrides(mut self) -> Self {
        if let Ok(cmd) = std::env::var(TRAINER_ENV) {
            self.trainer_cmd = cmd;
        }
        if let Ok(cmd) = std::env::var(PREDICTOR_ENV) {
            self.predictor_cmd = cmd;
        }
        self
    }
}

fn check_template(template: &str, builtin: &str, placeholders: &[&str]) -> Result<(), LoopError> {
    if template == builtin {
        return Ok(());
    }
    if template.split_whitespace().next().is_none() {
        return Err(LoopError::InvalidConfig("empty command template".into()));
    }
    let missing: Vec<&str> = placeholders.iter().copied().filter(|p| !template.contains(p)).collect();
    if !missing.is_empty() {
        return Err(LoopError::InvalidConfig(format!(
            "command `{template}` lacks {}",
            missing.join(", ")
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub image_id: String,
    pub image: PathBuf,
    pub label: PathBuf,
}

/// Trainer input: image/label pairs with a seeded train/val split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub n_classes: u32,
    pub train: Vec<ManifestItem>,
    pub val: Vec<ManifestItem>,
}

/// Pair every image with `label_dir/{image_id}.png` and hold out
/// `round(n * val_fraction)` of them, chosen by a seeded shuffle. Both lists
/// keep manifest order.
pub fn emit_manifest(
    images: &[ImageRecord],
    label_dir: &Path,
    n_classes: u32,
    split_seed: u64,
    val_fraction: f64,
) -> TrainManifest {
    let n = images.len();
    let n_val = ((n as f64 * val_fraction).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut util::rng(split_seed));
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let mut manifest = TrainManifest {
        n_classes,
        train: Vec::new(),
        val: Vec::new(),
    };
    for (img, val) in images.iter().zip(is_val) {
        let item = ManifestItem {
            image_id: img.image_id.clone(),
            image: img.path.clone(),
            label: label_dir.join(format!("{}.png", img.image_id)),
        };
        if val {
            manifest.val.push(item);
        } else {
            manifest.train.push(item);
        }
    }
    manifest
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: u32,
    pub label_dir: PathBuf,
    pub model_ref: String,
    pub metrics: Option<MetricsReport>,
    /// Seconds.
    pub wall_time: f64,
    /// Content hash of `label_dir`, used to validate resumption.
    pub label_hash: String,
}

impl IterationRecord {
    pub fn miou(&self) -> Option<f64> {
        self.metrics.as_ref().map(|m| m.miou)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    Plateau,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopOutcome {
    pub records: Vec<IterationRecord>,
    /// Iteration with the highest dev mIoU (the last one without dev GT).
    pub best_iter: u32,
    pub stop: StopReason,
}

/// Stop rule over the dev mIoU series seen so far, iteration 0 first.
/// Stops when the newest gain is below `eps`, or once `max_iters` training
/// rounds have run. Missing metrics never trigger a plateau.
pub fn plateau_decision(series: &[Option<f64>], eps: f64, max_iters: u32) -> Option<StopReason> {
    if let [.., Some(prev), Some(last)] = series {
        if last - prev < eps {
            return Some(StopReason::Plateau);
        }
    }
    if series.len() > max_iters as usize {
        return Some(StopReason::MaxIters);
    }
    None
}

/// Index of the first maximum; the last record when no metrics exist.
pub fn best_iteration(records: &[IterationRecord]) -> u32 {
    let mut best: Option<(u32, f64)> = None;
    for r in records {
        if let Some(m) = r.miou() {
            if best.is_none_or(|(_, b)| m > b) {
                best = Some((r.iter, m));
            }
        }
    }
    best.map(|(i, _)| i)
        .or_else(|| records.last().map(|r| r.iter))
        .unwrap_or(0)
}

/// Training and prediction, behind a trait so tests can mock them.
pub trait Backend {
    /// Train on `manifest`, writing the model under `out`; returns a model
    /// reference understood by [`Backend::predict`].
    fn train(&self, manifest: &Path, labels: &Path, out: &Path) -> Result<String, LoopError>;
    /// Predict every image of the image manifest into `out/{image_id}.png`.
    fn predict(&self, model: &str, images: &Path, out: &Path) -> Result<(), LoopError>;
}

/// Runs the configured command templates, or the built-in toy pair.
#[derive(Debug, Clone)]
pub struct CommandBackend {
    pub trainer_cmd: String,
    pub predictor_cmd: String,
}

impl CommandBackend {
    pub fn from_config(cfg: &LoopConfig) -> Self {
        CommandBackend {
            trainer_cmd: cfg.trainer_cmd.clone(),
            predictor_cmd: cfg.predictor_cmd.clone(),
        }
    }
}

fn run_template(template: &str, subs: &[(&str, &Path)]) -> Result<(), (Option<i32>, String)> {
    let mut tokens = template.split_whitespace().map(|tok| {
        subs.iter()
            .fold(tok.to_string(), |t, (k, v)| t.replace(k, &v.to_string_lossy()))
    });
    let program = tokens.next().unwrap_or_default();
    let output = Command::new(&program)
        .args(tokens)
        .output()
        .map_err(|e| (None, format!("cannot run {program}: {e}")))?;
    if output.status.success() {
        return Ok(());
    }
    let stderr = String::from_utf8_lossy(&output.stderr);
    let tail: String = stderr
        .chars()
        .rev()
        .take(2000)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    Err((output.status.code(), tail.trim().to_string()))
}

impl Backend for CommandBackend {
    fn train(&self, manifest: &Path, labels: &Path, out: &Path) -> Result<String, LoopError> {
        let model = out.join("model.json");
        if self.trainer_cmd == TOY_TRAINER {
            let m = toy::train(manifest, &toy::ToyParams::default()).map_err(|e| LoopError::TrainerFailed {
                code: None,
                stderr_tail: e.to_string(),
            })?;
            util::write_json(&model, &m)?;
            return Ok(model.to_string_lossy().into_owned());
        }
        std::fs::create_dir_all(out)?;
        run_template(&self.trainer_cmd, &[("{manifest}", manifest), ("{labels}", labels), ("{out}", out)])
            .map_err(|(code, stderr_tail)| LoopError::TrainerFailed { code, stderr_tail })?;
        // an external trainer may write anything under out; the directory is the reference
        Ok(out.to_string_lossy().into_owned())
    }

    fn predict(&self, model: &str, images: &Path, out: &Path) -> Result<(), LoopError> {
        std::fs::create_dir_all(out)?;
        if self.predictor_cmd == TOY_PREDICTOR {
            let fail = |e: String| LoopError::PredictorFailed {
                code: None,
                stderr_tail: e,
            };
            let m: toy::ToyModel = util::read_json(Path::new(model)).map_err(|e| fail(e.to_string()))?;
            return toy::predict_manifest(&m, images, out).map_err(|e| fail(e.to_string()));
        }
        run_template(
            &self.predictor_cmd,
            &[("{model}", Path::new(model)), ("{images}", images), ("{out}", out)],
        )
        .map_err(|(code, stderr_tail)| LoopError::PredictorFailed { code, stderr_tail })
    }
}

/// Every image must have a label PNG of the right size whose values are
/// class indices or the ignore value.
pub fn validate_predictions(images: &[ImageRecord], dir: &Path, n_classes: u32) -> Result<(), LoopError> {
    images.par_iter().try_for_each(|img| {
        let bad = |reason: String| LoopError::BadPrediction {
            image_id: img.image_id.clone(),
            reason,
        };
        let path = dir.join(format!("{}.png", img.image_id));
        if !path.exists() {
            return Err(bad("missing label file".into()));
        }
        let label = read_label_png(&path).map_err(|e| bad(e.to_string()))?;
        if (label.width, label.height) != (img.width, img.height) {
            return Err(bad(format!(
                "label is {}x{}, image is {}x{}",
                label.width, label.height, img.width, img.height
            )));
        }
        if let Some(&v) = label.data.iter().find(|&&v| v as u32 >= n_classes && v != IGNORE_LABEL) {
            return Err(bad(format!("label {v} outside 0..{n_classes}")));
        }
        Ok(())
    })
}

fn evaluate(cfg: &LoopConfig, label_dir: &Path) -> Result<Option<MetricsReport>, LoopError> {
    match &cfg.dev_gt_dir {
        Some(gt) => Ok(Some(evaluate_dirs(gt, label_dir, cfg.n_classes)?.report()?)),
        None => Ok(None),
    }
}

fn read_log(path: &Path) -> Result<Vec<IterationRecord>, LoopError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| LoopError::CorruptLog(e.to_string())))
        .collect()
}

fn write_log(path: &Path, records: &[IterationRecord]) -> Result<(), LoopError> {
    let mut bytes = Vec::new();
    for r in records {
        serde_json::to_writer(&mut bytes, r).map_err(std::io::Error::other)?;
        bytes.push(b'\n');
    }
    util::write_atomic(path, &bytes)?;
    Ok(())
}

fn append_log(path: &Path, record: &IterationRecord) -> Result<(), LoopError> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(record).map_err(std::io::Error::other)?;
    line.push(b'\n');
    f.write_all(&line)?;
    f.sync_all()?;
    Ok(())
}

/// Train on `current_labels`, predict the corpus into `workdir/iter_{iter}/labels`,
/// validate and evaluate.
pub fn run_iteration(
    cfg: &LoopConfig,
    backend: &dyn Backend,
    images: &[ImageRecord],
    iter: u32,
    current_labels: &Path,
) -> Result<IterationRecord, LoopError> {
    let start = Instant::now();
    for img in images {
        if !current_labels.join(format!("{}.png", img.image_id)).exists() {
            return Err(LoopError::MissingLabel(img.image_id.clone()));
        }
    }
    let dir = cfg.workdir.join(format!("iter_{iter}"));
    let label_dir = dir.join("labels");
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&label_dir)?;
    let manifest_path = dir.join("train_manifest.json");
    let manifest = emit_manifest(images, current_labels, cfg.n_classes, cfg.split_seed, cfg.val_fraction);
    util::write_json(&manifest_path, &manifest)?;

    let model_ref = backend.train(&manifest_path, current_labels, &dir.join("model"))?;
    backend.predict(&model_ref, &cfg.manifest, &label_dir)?;
    validate_predictions(images, &label_dir, cfg.n_classes)?;
    let metrics = evaluate(cfg, &label_dir)?;
    Ok(IterationRecord {
        iter,
        label_hash: util::hash_dir(&label_dir)?,
        label_dir,
        model_ref,
        metrics,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Run (or resume) the loop. Logged iterations whose label directory still
/// hashes to the recorded value are reused as-is; the first mismatch and
/// everything after it is recomputed.
pub fn run_loop(cfg: &LoopConfig, backend: &dyn Backend, initial_labels: &Path) -> Result<LoopOutcome, LoopError> {
    cfg.validate()?;
    let images = load_manifest(&cfg.manifest)?;
    std::fs::create_dir_all(&cfg.workdir)?;
    let log_path = cfg.workdir.join(LOG_FILE);

    let mut previous = read_log(&log_path)?.into_iter();
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut dirty = false;

    let initial_hash = util::hash_dir(initial_labels)?;
    match previous.next() {
        Some(r) if r.iter == 0 && r.label_hash == initial_hash && r.label_dir == initial_labels => records.push(r),
        _ => {
            let start = Instant::now();
            validate_predictions(&images, initial_labels, cfg.n_classes)?;
            records.push(IterationRecord {
                iter: 0,
                label_dir: initial_labels.to_path_buf(),
                model_ref: "clustering".into(),
                metrics: evaluate(cfg, initial_labels)?,
                wall_time: start.elapsed().as_secs_f64(),
                label_hash: initial_hash,
            });
            dirty = true;
        }
    }
    if dirty {
        write_log(&log_path, &records)?;
    }

    let stop = loop {
        let series: Vec<Option<f64>> = records.iter().map(|r| r.miou()).collect();
        if let Some(reason) = plateau_decision(&series, cfg.plateau_eps, cfg.max_iters) {
            break reason;
        }
        let iter = records.len() as u32;
        let reusable = if dirty { None } else { previous.next() };
        let reused = reusable.filter(|r| {
            r.iter == iter && util::hash_dir(&r.label_dir).is_ok_and(|h| h == r.label_hash)
        });
        match reused {
            Some(r) => {
                log::info!("iteration {iter}: reusing logged result");
                records.push(r);
            }
            None => {
                if !dirty {
                    // drop stale log entries from here on
                    write_log(&log_path, &records)?;
                    dirty = true;
                }
                let current = records.last().map(|r| r.label_dir.clone()).unwrap_or_default();
                let record = run_iteration(cfg, backend, &images, iter, &current)?;
                log::info!("iteration {iter}: miou {:?}", record.miou());
                append_log(&log_path, &record)?;
                records.push(record);
            }
        }
    };
    Ok(LoopOutcome {
        best_iter: best_iteration(&records),
        records,
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(id: &str) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            width: 4,
            height: 4,
            path: PathBuf::from(format!("images/{id}.png")),
        }
    }

    #[test]
    fn manifest_split_counts() {
        let images: Vec<_> = (0..100).map(|i| img(&format!("i{i:03}"))).collect();
        let m = emit_manifest(&images, Path::new("lab"), 3, 9, 0.2);
        assert_eq!((m.train.len(), m.val.len()), (80, 20));
        assert_eq!(m, emit_manifest(&images, Path::new("lab"), 3, 9, 0.2));
        let all = emit_manifest(&images, Path::new("lab"), 3, 9, 0.0);
        assert_eq!(all.train.len(), 100);
        assert!(all.val.is_empty());
        assert_eq!(all.train[5].label, PathBuf::from("lab/i005.png"));
    }

    #[test]
    fn plateau_on_rising_series() {
        let s = |v: &[f64]| v.iter().map(|&x| Some(x)).collect::<Vec<_>>();
        assert_eq!(plateau_decision(&s(&[72.04]), 0.1, 2), None);
        assert_eq!(plateau_decision(&s(&[72.04, 88.64]), 0.1, 2), None);
        assert_eq!(plateau_decision(&s(&[72.04, 88.64, 89.23]), 0.1, 2), Some(StopReason::MaxIters));
        assert_eq!(plateau_decision(&s(&[72.04, 70.0]), 0.1, 5), Some(StopReason::Plateau));
        assert_eq!(plateau_decision(&s(&[72.04, 72.1]), 0.1, 5), Some(StopReason::Plateau));
        assert_eq!(plateau_decision(&[None, None], 0.1, 5), None);
        assert_eq!(plateau_decision(&[None, None], 0.1, 1), Some(StopReason::MaxIters));
    }

    #[test]
    fn templates_need_placeholders() {
        let mut cfg = LoopConfig {
            n_classes: 3,
            ..Default::default()
        };
        assert!(cfg.validate().is_ok());
        cfg.trainer_cmd = "train.sh {manifest} {out}".into();
        assert!(matches!(cfg.validate(), Err(LoopError::InvalidConfig(_))));
        cfg.trainer_cmd = "train.sh --m {manifest} --l {labels} -o {out}".into();
        assert!(cfg.validate().is_ok());
        cfg.max_iters = 0;
        assert!(cfg.validate().is_err());
    }
}
