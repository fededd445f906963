//! Partitioning Around Medoids: greedy BUILD followed by best-improvement
//! SWAP on Euclidean distances.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{sq_dist, ClusterError, Partition};
use crate::util;

pub(crate) fn distance_matrix(data: ArrayView2<f64>) -> Array2<f64> {
    let n = data.nrows();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| sq_dist(data.row(i), data.row(j)).sqrt()).collect())
        .collect();
    Array2::from_shape_fn((n, n), |(i, j)| rows[i][j])
}

/// Medoid indices plus the final labelling.
#[derive(Debug, Clone)]
pub struct Medoids {
    pub medoids: Vec<usize>,
    pub labels: Vec<usize>,
    pub cost: f64,
}

/// PAM over a precomputed dissimilarity matrix. `seed` only orders ties in
/// the BUILD phase; SWAP ties go to the lowest (medoid slot, candidate).
pub fn pam(dist: ArrayView2<f64>, k: usize, seed: u64, max_iter: u32) -> Result<Medoids, ClusterError> {
    let n = dist.nrows();
    super::check_k(k, n)?;

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut util::rng(seed));
    let mut rank = vec![0usize; n];
    for (r, &i) in perm.iter().enumerate() {
        rank[i] = r;
    }

    // BUILD
    let first = (0..n)
        .map(|i| (dist.row(i).sum(), rank[i], i))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|t| t.2)
        .expect("n >= 1");
    let mut medoids = vec![first];
    let mut is_medoid = vec![false; n];
    is_medoid[first] = true;
    let mut near: Vec<f64> = dist.row(first).to_vec();
    while medoids.len() < k {
        let best = (0..n)
            .filter(|&c| !is_medoid[c])
            .map(|c| {
                let gain: f64 = (0..n).map(|j| (near[j] - dist[[c, j]]).max(0.0)).sum();
                (gain, rank[c], c)
            })
            .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
            .map(|t| t.2)
            .expect("k <= n leaves a candidate");
        medoids.push(best);
        is_medoid[best] = true;
        for j in 0..n {
            near[j] = near[j].min(dist[[best, j]]);
        }
    }

    // SWAP
    let (mut labels, mut cost) = assign(dist, &medoids);
    for _ in 0..max_iter {
        let (nearest, second) = nearest_two(dist, &medoids);
        let mut best: Option<(f64, usize, usize)> = None;
        for (slot, &m) in medoids.iter().enumerate() {
            for h in (0..n).filter(|&h| !is_medoid[h]) {
                let delta: f64 = (0..n)
                    .map(|j| {
                        let dh = dist[[h, j]];
                        if medoids[nearest[j].0] == m {
                            dh.min(second[j]) - nearest[j].1
                        } else {
                            dh.min(nearest[j].1) - nearest[j].1
                        }
                    })
                    .sum();
                if best.is_none_or(|b| delta < b.0) {
                    best = Some((delta, slot, h));
                }
            }
        }
        match best {
            Some((delta, slot, h)) if delta < -1e-12 * cost.max(1.0) => {
                is_medoid[medoids[slot]] = false;
                is_medoid[h] = true;
                medoids[slot] = h;
                (labels, cost) = assign(dist, &medoids);
            }
            _ => break,
        }
    }
    Ok(Medoids {
        medoids,
        labels,
        cost,
    })
}

fn assign(dist: ArrayView2<f64>, medoids: &[usize]) -> (Vec<usize>, f64) {
    let mut cost = 0.0;
    let labels = (0..dist.nrows())
        .map(|j| {
            let (slot, d) = medoids
                .iter()
                .enumerate()
                .map(|(s, &m)| (s, dist[[m, j]]))
                .fold((0, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b });
            cost += d;
            slot
        })
        .collect();
    (labels, cost)
}

fn nearest_two(dist: ArrayView2<f64>, medoids: &[usize]) -> (Vec<(usize, f64)>, Vec<f64>) {
    let n = dist.nrows();
    let mut nearest = Vec::with_capacity(n);
    let mut second = Vec::with_capacity(n);
    for j in 0..n {
        let (mut b1, mut b2) = ((0, f64::INFINITY), f64::INFINITY);
        for (s, &m) in medoids.iter().enumerate() {
            let d = dist[[m, j]];
            if d < b1.1 {
                b2 = b1.1;
                b1 = (s, d);
            } else if d < b2 {
                b2 = d;
            }
        }
        nearest.push(b1);
        second.push(b2);
    }
    (nearest, second)
}

pub fn kmedoids(data: ArrayView2<f64>, k: usize, seed: u64, max_iter: u32) -> Result<Partition, ClusterError> {
    super::check_k(k, data.nrows())?;
    let dist = distance_matrix(data);
    let m = pam(dist.view(), k, seed, max_iter)?;
    let mut p = Partition::from_labels(data, m.labels, k);
    for (slot, &i) in m.medoids.iter().enumerate() {
        p.centers.row_mut(slot).assign(&data.row(i));
    }
    p.inertia = m.cost;
    p.medoids = Some(m.medoids);
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn collinear_five() {
        let data = array![[0.0], [1.0], [2.0], [10.0], [11.0]];
        for seed in 0..8 {
            let p = kmedoids(data.view(), 2, seed, 100).unwrap();
            let mut meds = p.medoids.clone().unwrap();
            meds.sort();
            assert!(meds == vec![1, 3] || meds == vec![1, 4], "{meds:?}");
            assert!((p.inertia - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn k_equals_n_costs_nothing() {
        let data = array![[0.0, 1.0], [4.0, 4.0], [9.0, -1.0]];
        let p = kmedoids(data.view(), 3, 0, 100).unwrap();
        assert_eq!(p.inertia, 0.0);
    }

    #[test]
    fn repeated_point_costs_nothing() {
        let data = Array2::from_elem((5, 2), 3.0);
        for k in 1..=5 {
            assert_eq!(kmedoids(data.view(), k, 7, 100).unwrap().inertia, 0.0);
        }
    }
}
