//! Turn class-agnostic mask proposals and per-region feature vectors into
//! semantic pseudo-labels.
//!
//! The pipeline runs in stages, each with a file format at its boundary so
//! that neural components (mask generators, feature backbones, segmentation
//! trainers) stay outside the toolkit:
//!
//! 1. [`masks`]: decode and validate RLE mask proposals, filter them by area,
//!    report coverage, and crop region thumbnails.
//! 2. [`tiling`]: map road detections back to full resolution and cut tiles.
//! 3. [`features`]: the `.cmrp` feature-pack format and a deterministic
//!    hand-crafted baseline extractor.
//! 4. [`clustering`]: spectral, k-means, k-medoids and agglomerative
//!    clustering over a feature pack.
//! 5. [`labeling`]: cluster merging and pseudo-label rasterization.
//! 6. [`metrics`]: confusion matrices, IoU, mIoU and pixel accuracy.
//! 7. [`selftrain`]: the iterative teacher/student loop driver.
//!
//! [`synth`] generates deterministic synthetic datasets that exercise every
//! stage without any model or real imagery, and [`pipeline`] holds the
//! directory-level glue shared by the CLI and the review server.

pub mod clustering;
pub mod features;
pub mod labeling;
pub mod masks;
pub mod metrics;
pub mod pipeline;
pub mod selftrain;
pub mod synth;
pub mod tiling;

mod util;

pub use clustering::{ClusterConfig, ClusterMethod, ClusterModel};
pub use features::FeaturePack;
pub use labeling::{LabelMap, MergeMap, MergeTarget, IGNORE_LABEL};
pub use masks::{BBox, Bitmask, ImageRecord, MaskRecord};

pub use metrics::{ConfusionMatrix, MetricsReport};
