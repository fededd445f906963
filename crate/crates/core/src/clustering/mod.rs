//! Clustering of region feature vectors.
//!
//! Four methods share one output type: [`kmeans`](kmeans::kmeans),
//! [`kmedoids`](kmedoids::kmedoids) (PAM),
//! [`agglomerative`](agglomerative::agglomerative) and
//! [`spectral`](spectral::spectral). [`cluster`] runs one of them over a
//! [`FeaturePack`] and produces a [`ClusterModel`] keyed by region id.
//!
//! Every method is deterministic for a given seed: ties are broken by the
//! lowest index and parallel work only ever fills per-index slots.

pub mod agglomerative;
pub mod eigen;
pub mod kmeans;
pub mod kmedoids;
pub mod spectral;

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeaturePack;
use crate::util;

pub use agglomerative::Linkage;
pub use eigen::{eig_symmetric, SymmetricEigen};
pub use spectral::{Affinity, Sigma, SpectralParams};

pub const DEFAULT_K: u32 = 20;
pub const DEFAULT_EXEMPLARS: usize = 16;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("k = {k} exceeds the number of samples ({n})")]
    KTooLarge { k: usize, n: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("QL iteration did not converge for eigenvalue {0}")]
    NoConvergence(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub(crate) fn check_k(k: usize, n: usize) -> Result<(), ClusterError> {
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if k > n {
        return Err(ClusterError::KTooLarge { k, n });
    }
    Ok(())
}

#[inline]
pub(crate) fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Raw output of a clustering method over a dense matrix.
#[derive(Debug, Clone)]
pub struct Partition {
    /// Cluster index in `[0, k)` per row. Some clusters may be empty.
    pub labels: Vec<usize>,
    /// `k x dim`: member means, or medoid rows for k-medoids.
    pub centers: Array2<f64>,
    /// Within-cluster sum of squared distances to the centres; for
    /// k-medoids the sum of (unsquared) distances to the medoids.
    pub inertia: f64,
    pub medoids: Option<Vec<usize>>,
}

impl Partition {
    /// Centres as member means and inertia as the squared-error sum.
    pub fn from_labels(data: ArrayView2<f64>, labels: Vec<usize>, k: usize) -> Self {
        let centers = means(data, &labels, k);
        let inertia = labels
            .iter()
            .enumerate()
            .map(|(i, &c)| sq_dist(data.row(i), centers.row(c)))
            .sum();
        Partition {
            labels,
            centers,
            inertia,
            medoids: None,
        }
    }
}

fn means(data: ArrayView2<f64>, labels: &[usize], k: usize) -> Array2<f64> {
    let mut sums = Array2::<f64>::zeros((k, data.ncols()));
    let mut counts = vec![0usize; k];
    for (i, &c) in labels.iter().enumerate() {
        sums.row_mut(c).scaled_add(1.0, &data.row(i));
        counts[c] += 1;
    }
    for (c, mut row) in sums.rows_mut().into_iter().enumerate() {
        if counts[c] > 0 {
            row.mapv_inplace(|v| v / counts[c] as f64);
        }
    }
    sums
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMethod {
    #[default]
    Spectral,
    Kmeans,
    Kmedoids,
    Agglomerative,
}

impl std::str::FromStr for ClusterMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "spectral" => Ok(Self::Spectral),
            "kmeans" | "k-means" => Ok(Self::Kmeans),
            "kmedoids" | "k-medoids" => Ok(Self::Kmedoids),
            "agglomerative" => Ok(Self::Agglomerative),
            other => Err(format!("unknown clustering method {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub method: ClusterMethod,
    pub k: u32,
    pub seed: u64,
    pub spectral: SpectralParams,
    pub agglo_linkage: Linkage,
    pub max_iter: u32,
    pub tol: f64,
    /// Above this many regions the O(n^2) methods cluster a seeded uniform
    /// subsample and assign the rest to the nearest centroid.
    pub max_exact_n: u32,
    pub l2_normalize: bool,
    pub exemplars: u32,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            method: ClusterMethod::Spectral,
            k: DEFAULT_K,
            seed: 0,
            spectral: SpectralParams::default(),
            agglo_linkage: Linkage::Average,
            max_iter: 300,
            tol: 1e-6,
            max_exact_n: 8000,
            l2_normalize: false,
            exemplars: DEFAULT_EXEMPLARS as u32,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), ClusterError> {
        if self.k == 0 {
            return Err(ClusterError::ZeroK);
        }
        if !(self.tol > 0.0) {
            return Err(ClusterError::InvalidConfig("tol must be positive".into()));
        }
        if self.max_exact_n < self.k {
            return Err(ClusterError::InvalidConfig("max_exact_n must be at least k".into()));
        }
        if let Sigma::Fixed(s) = self.spectral.sigma {
            if !(s > 0.0) {
                return Err(ClusterError::InvalidConfig("fixed sigma must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Clustering result keyed by region id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub assignments: BTreeMap<String, u32>,
    pub centroids: Vec<Vec<f64>>,
    pub config: ClusterConfig,
    pub inertia: f64,
    pub exemplars: BTreeMap<u32, Vec<String>>,
}

impl ClusterModel {
    pub fn n_clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_clusters()];
        for &c in self.assignments.values() {
            sizes[c as usize] += 1;
        }
        sizes
    }

    pub fn cluster_ids(&self) -> impl Iterator<Item = u32> {
        0..self.n_clusters() as u32
    }
}

fn run_method(data: ArrayView2<f64>, k: usize, cfg: &ClusterConfig) -> Result<Partition, ClusterError> {
    match cfg.method {
        ClusterMethod::Kmeans => kmeans::kmeans(data, k, cfg.seed, cfg.max_iter, cfg.tol),
        ClusterMethod::Kmedoids => kmedoids::kmedoids(data, k, cfg.seed, cfg.max_iter),
        ClusterMethod::Agglomerative => agglomerative::agglomerative(data, k, cfg.agglo_linkage),
        ClusterMethod::Spectral => {
            spectral::spectral(data, k, &cfg.spectral, cfg.seed, cfg.max_iter, cfg.tol)
        }
    }
}

/// Feature matrix as `f64`, optionally with unit-length rows.
pub fn pack_matrix(pack: &FeaturePack, l2_normalize: bool) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((pack.count(), pack.dim as usize), |(i, j)| {
        pack.matrix[i * pack.dim as usize + j] as f64
    });
    if l2_normalize {
        for mut row in m.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row.mapv_inplace(|v| v / norm);
            }
        }
    }
    m
}

/// Run the configured method over a subsample when the region count exceeds
/// `max_exact_n` (k-means runs on everything), then label every row.
pub fn cluster_matrix(data: ArrayView2<f64>, cfg: &ClusterConfig) -> Result<Partition, ClusterError> {
    cfg.validate()?;
    let n = data.nrows();
    let k = cfg.k as usize;
    check_k(k, n)?;
    let cap = cfg.max_exact_n as usize;
    if n <= cap || cfg.method == ClusterMethod::Kmeans {
        return run_method(data, k, cfg);
    }

    let mut sample = index::sample(&mut util::rng(cfg.seed), n, cap).into_vec();
    sample.sort_unstable();
    let sub = data.select(ndarray::Axis(0), &sample);
    let part = run_method(sub.view(), k, cfg)?;
    let centers = if cfg.method == ClusterMethod::Kmedoids {
        part.centers.clone()
    } else {
        means(sub.view(), &part.labels, k)
    };
    let mut labels = vec![0; n];
    for (&i, &l) in sample.iter().zip(&part.labels) {
        labels[i] = l;
    }
    let mut in_sample = vec![false; n];
    sample.iter().for_each(|&i| in_sample[i] = true);
    for i in (0..n).filter(|&i| !in_sample[i]) {
        labels[i] = kmeans::nearest(data.row(i), &centers).0;
    }
    let mut out = Partition::from_labels(data, labels, k);
    if cfg.method == ClusterMethod::Kmedoids {
        out.centers = centers;
        out.inertia = out
            .labels
            .iter()
            .enumerate()
            .map(|(i, &c)| sq_dist(data.row(i), out.centers.row(c)).sqrt())
            .sum();
        out.medoids = part.medoids.map(|m| m.iter().map(|&s| sample[s]).collect());
    }
    Ok(out)
}

/// Cluster a feature pack. Empty clusters are dropped and the survivors
/// renumbered from 0 in their original order.
pub fn cluster(pack: &FeaturePack, cfg: &ClusterConfig) -> Result<ClusterModel, ClusterError> {
    let data = pack_matrix(pack, cfg.l2_normalize);
    let part = cluster_matrix(data.view(), cfg)?;
    Ok(build_model(&pack.region_ids, data.view(), part, cfg))
}

fn build_model(ids: &[String], data: ArrayView2<f64>, part: Partition, cfg: &ClusterConfig) -> ClusterModel {
    let k = part.centers.nrows();
    let mut counts = vec![0usize; k];
    part.labels.iter().for_each(|&l| counts[l] += 1);
    let mut remap = vec![u32::MAX; k];
    let mut next = 0;
    for c in 0..k {
        if counts[c] > 0 {
            remap[c] = next;
            next += 1;
        }
    }
    let centroids: Vec<Vec<f64>> = (0..k)
        .filter(|&c| counts[c] > 0)
        .map(|c| part.centers.row(c).to_vec())
        .collect();

    let mut members: Vec<Vec<(f64, usize)>> = vec![Vec::new(); centroids.len()];
    for (i, &l) in part.labels.iter().enumerate() {
        let c = remap[l] as usize;
        members[c].push((sq_dist(data.row(i), part.centers.row(l)), i));
    }
    let exemplars = members
        .into_iter()
        .enumerate()
        .map(|(c, mut m)| {
            m.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let ids = m
                .iter()
                .take(cfg.exemplars.max(1) as usize)
                .map(|&(_, i)| ids[i].clone())
                .collect();
            (c as u32, ids)
        })
        .collect();

    ClusterModel {
        assignments: ids
            .iter()
            .zip(&part.labels)
            .map(|(id, &l)| (id.clone(), remap[l]))
            .collect(),
        centroids,
        config: cfg.clone(),
        inertia: part.inertia,
        exemplars,
    }
}
