//! Normalized spectral clustering (Ng, Jordan and Weiss).
//!
//! Gaussian affinities, symmetric normalized Laplacian
//! `L = I - D^-1/2 A D^-1/2`, the eigenvectors of its `k` smallest
//! eigenvalues as an embedding, unit-length rows, then k-means.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{eigen::eig_symmetric, kmeans::kmeans_restarts, sq_dist, ClusterError, Partition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Affinity {
    #[default]
    RbfDense,
    KnnGraph,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sigma {
    #[default]
    MedianHeuristic,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectralParams {
    pub affinity: Affinity,
    pub sigma: Sigma,
    pub knn: u32,
    /// Seeded k-means runs on the embedding; the lowest-inertia one is kept.
    pub restarts: u32,
}

impl Default for SpectralParams {
    fn default() -> Self {
        SpectralParams {
            affinity: Affinity::RbfDense,
            sigma: Sigma::MedianHeuristic,
            knn: 10,
            restarts: 10,
        }
    }
}

fn pairwise_sq(data: ArrayView2<f64>) -> Array2<f64> {
    let n = data.nrows();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| sq_dist(data.row(i), data.row(j))).collect())
        .collect();
    Array2::from_shape_fn((n, n), |(i, j)| rows[i][j])
}

/// Median of the distances over all unordered pairs (0 for fewer than two points).
pub fn median_pairwise_distance(sq: &Array2<f64>) -> f64 {
    let n = sq.nrows();
    let mut d: Vec<f64> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq[[i, j]]);
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    let (_, &mut hi, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let median_sq = if d.len() % 2 == 1 {
        hi
    } else {
        let lo = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo + hi) / 2.0
    };
    median_sq.sqrt()
}

/// Gaussian affinity with a zero diagonal, optionally restricted to the
/// symmetrized k-nearest-neighbour graph.
pub fn affinity_matrix(data: ArrayView2<f64>, params: &SpectralParams) -> Array2<f64> {
    let n = data.nrows();
    let sq = pairwise_sq(data);
    let sigma = match params.sigma {
        Sigma::Fixed(s) => s,
        Sigma::MedianHeuristic => median_pairwise_distance(&sq),
    };
    let denom = if sigma > 0.0 { 2.0 * sigma * sigma } else { 1.0 };
    let mut a = sq.mapv(|d| (-d / denom).exp());
    a.diag_mut().fill(0.0);

    if params.affinity == Affinity::KnnGraph {
        let knn = (params.knn as usize).min(n.saturating_sub(1));
        let mut keep = Array2::from_elem((n, n), false);
        for i in 0..n {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&x, &y| sq[[i, x]].total_cmp(&sq[[i, y]]).then(x.cmp(&y)));
            for &j in others.iter().take(knn) {
                keep[[i, j]] = true;
                keep[[j, i]] = true;
            }
        }
        a.zip_mut_with(&keep, |v, &k| {
            if !k {
                *v = 0.0
            }
        });
    }
    a
}

/// Row-normalized spectral embedding (`n x k`) of an affinity matrix.
/// Returns the embedding and the number of isolated vertices.
pub fn spectral_embedding(affinity: ArrayView2<f64>, k: usize) -> Result<(Array2<f64>, usize), ClusterError> {
    let n = affinity.nrows();
    let degree: Vec<f64> = affinity.rows().into_iter().map(|r| r.sum()).collect();
    let isolated = degree.iter().filter(|&&d| d <= 0.0).count();
    let inv_sqrt: Vec<f64> = degree
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let mut lap = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let norm = inv_sqrt[i] * affinity[[i, j]] * inv_sqrt[j];
            lap[[i, j]] = if i == j { 1.0 - norm } else { -norm };
        }
    }
    // exact symmetry for the eigensolver
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (lap[[i, j]] + lap[[j, i]]);
            lap[[i, j]] = v;
            lap[[j, i]] = v;
        }
    }
    let eig = eig_symmetric(lap.view())?;
    let mut emb = eig.vectors.slice(ndarray::s![.., ..k]).to_owned();
    for mut row in emb.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    Ok((emb, isolated))
}

/// Cluster directly from an affinity matrix; returns labels only.
pub fn spectral_from_affinity(
    affinity: ArrayView2<f64>,
    k: usize,
    seed: u64,
    restarts: u32,
    max_iter: u32,
    tol: f64,
) -> Result<Vec<usize>, ClusterError> {
    super::check_k(k, affinity.nrows())?;
    let (emb, isolated) = spectral_embedding(affinity, k)?;
    if isolated > 0 {
        log::warn!("spectral clustering: {isolated} isolated vertices (zero degree)");
    }
    Ok(kmeans_restarts(emb.view(), k, seed, restarts, max_iter, tol)?.labels)
}

pub fn spectral(
    data: ArrayView2<f64>,
    k: usize,
    params: &SpectralParams,
    seed: u64,
    max_iter: u32,
    tol: f64,
) -> Result<Partition, ClusterError> {
    super::check_k(k, data.nrows())?;
    let affinity = affinity_matrix(data, params);
    let labels = spectral_from_affinity(affinity.view(), k, seed, params.restarts, max_iter, tol)?;
    Ok(Partition::from_labels(data, labels, k))
}
