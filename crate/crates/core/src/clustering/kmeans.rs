//! Lloyd's algorithm with k-means++ seeding.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rayon::prelude::*;

use super::{sq_dist, ClusterError, Partition};
use crate::util;

pub(crate) fn nearest(point: ArrayView1<f64>, centers: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.outer_iter().enumerate() {
        let d = sq_dist(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(data: ArrayView2<f64>, centers: &Array2<f64>) -> Vec<(usize, f64)> {
    (0..data.nrows())
        .into_par_iter()
        .map(|i| nearest(data.row(i), centers))
        .collect()
}

/// k-means++ seeding: first centre uniform, each next one sampled with
/// probability proportional to the squared distance to the nearest chosen
/// centre. When every remaining point coincides with a centre the lowest
/// unused index is taken.
pub fn kmeans_plus_plus(data: ArrayView2<f64>, k: usize, seed: u64) -> Vec<usize> {
    let n = data.nrows();
    let mut rng = util::rng(seed);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(data.row(i), data.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total has a positive weight")
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, di) in d2.iter_mut().enumerate() {
            *di = di.min(sq_dist(data.row(i), data.row(next)));
        }
    }
    chosen
}

pub fn kmeans(
    data: ArrayView2<f64>,
    k: usize,
    seed: u64,
    max_iter: u32,
    tol: f64,
) -> Result<Partition, ClusterError> {
    let (n, dim) = data.dim();
    super::check_k(k, n)?;
    let init = kmeans_plus_plus(data, k, seed);
    let mut centers = Array2::zeros((k, dim));
    for (c, &i) in init.iter().enumerate() {
        centers.row_mut(c).assign(&data.row(i));
    }
    kmeans_from(data, centers, max_iter, tol)
}

/// Best of `restarts` seeded runs by inertia; run `r` uses `seed + r`, so a
/// single restart is plain [`kmeans`]. Ties keep the earliest run.
pub fn kmeans_restarts(
    data: ArrayView2<f64>,
    k: usize,
    seed: u64,
    restarts: u32,
    max_iter: u32,
    tol: f64,
) -> Result<Partition, ClusterError> {
    let runs: Vec<Partition> = (0..restarts.max(1) as u64)
        .into_par_iter()
        .map(|r| kmeans(data, k, seed.wrapping_add(r), max_iter, tol))
        .collect::<Result<_, _>>()?;
    Ok(runs
        .into_iter()
        .reduce(|best, p| if p.inertia < best.inertia { p } else { best })
        .expect("at least one run"))
}

/// Lloyd iterations from the given initial centres.
pub fn kmeans_from(
    data: ArrayView2<f64>,
    mut centers: Array2<f64>,
    max_iter: u32,
    tol: f64,
) -> Result<Partition, ClusterError> {
    let (n, dim) = data.dim();
    let k = centers.nrows();
    let mut prev_inertia = f64::INFINITY;
    for _ in 0..max_iter.max(1) {
        let assignment = assign(data, &centers);
        let inertia: f64 = assignment.iter().map(|a| a.1).sum();
        debug_assert!(
            inertia <= prev_inertia * (1.0 + 1e-9) + 1e-12,
            "inertia increased: {prev_inertia} -> {inertia}"
        );
        prev_inertia = inertia;

        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assignment.iter().enumerate() {
            sums.row_mut(c).scaled_add(1.0, &data.row(i));
            counts[c] += 1;
        }
        let mut taken = vec![false; n];
        let mut shift = 0.0f64;
        for c in 0..k {
            let new_center = if counts[c] > 0 {
                sums.row(c).mapv(|v| v / counts[c] as f64)
            } else {
                // reseed an empty cluster at the point worst served by its centre
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .fold(None, |best: Option<(usize, f64)>, i| match best {
                        Some((_, d)) if assignment[i].1 <= d => best,
                        _ => Some((i, assignment[i].1)),
                    })
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                taken[far] = true;
                data.row(far).to_owned()
            };
            shift = shift.max(sq_dist(new_center.view(), centers.row(c)).sqrt());
            centers.row_mut(c).assign(&new_center);
        }
        if shift < tol {
            break;
        }
    }
    let labels: Vec<usize> = assign(data, &centers).into_iter().map(|a| a.0).collect();
    Ok(Partition::from_labels(data, labels, k))
}
