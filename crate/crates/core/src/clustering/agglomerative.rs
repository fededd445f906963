//! Bottom-up hierarchical clustering with Lance-Williams distance updates.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::{sq_dist, ClusterError, Partition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    #[default]
    Average,
    Ward,
}

/// Condensed upper-triangular distance store.
struct Condensed {
    n: usize,
    d: Vec<f64>,
}

impl Condensed {
    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        i * (2 * self.n - i - 1) / 2 + (j - i - 1)
    }
    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.d[self.idx(i, j)]
    }
    #[inline]
    fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.d[k] = v;
    }
}

/// Merge the closest pair of active clusters until `k` remain. A merged
/// cluster keeps the lower of the two indices, so clusters are always named
/// by their smallest member and ties go to the lexicographically smallest
/// pair.
pub fn agglomerative(data: ArrayView2<f64>, k: usize, linkage: Linkage) -> Result<Partition, ClusterError> {
    let n = data.nrows();
    super::check_k(k, n)?;

    let mut dist = Condensed {
        n,
        d: Vec::with_capacity(n * n.saturating_sub(1) / 2),
    };
    for i in 0..n {
        for j in i + 1..n {
            let sq = sq_dist(data.row(i), data.row(j));
            dist.d.push(match linkage {
                Linkage::Average => sq.sqrt(),
                Linkage::Ward => sq,
            });
        }
    }

    let mut active = vec![true; n];
    let mut size = vec![1usize; n];
    let mut parent: Vec<usize> = (0..n).collect();
    // nearest active partner with a larger index
    let mut nn: Vec<Option<(usize, f64)>> = vec![None; n];
    let refresh = |i: usize, active: &[bool], dist: &Condensed| -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for j in i + 1..active.len() {
            if active[j] {
                let d = dist.get(i, j);
                if best.is_none_or(|b| d < b.1) {
                    best = Some((j, d));
                }
            }
        }
        best
    };
    for i in 0..n {
        nn[i] = refresh(i, &active, &dist);
    }

    let mut clusters = n;
    while clusters > k {
        let (a, b, _) = (0..n)
            .filter(|&i| active[i])
            .filter_map(|i| nn[i].map(|(j, d)| (i, j, d)))
            .fold(None, |best: Option<(usize, usize, f64)>, c| match best {
                Some(b) if c.2 >= b.2 => Some(b),
                _ => Some(c),
            })
            .expect("more than k clusters means at least one pair");

        let (na, nb) = (size[a] as f64, size[b] as f64);
        let dab = dist.get(a, b);
        for m in (0..n).filter(|&m| active[m] && m != a && m != b) {
            let (dma, dmb) = (dist.get(m, a), dist.get(m, b));
            let nm = size[m] as f64;
            let merged = match linkage {
                Linkage::Average => (na * dma + nb * dmb) / (na + nb),
                Linkage::Ward => ((nm + na) * dma + (nm + nb) * dmb - nm * dab) / (nm + na + nb),
            };
            dist.set(m, a, merged);
        }
        active[b] = false;
        size[a] += size[b];
        parent[b] = a;
        clusters -= 1;

        for m in 0..n {
            if !active[m] {
                continue;
            }
            let stale = m == a || matches!(nn[m], Some((j, _)) if j == a || j == b);
            if stale {
                nn[m] = refresh(m, &active, &dist);
            } else if m < a {
                let d = dist.get(m, a);
                if let Some((j, dj)) = nn[m] {
                    if d < dj || (d == dj && a < j) {
                        nn[m] = Some((a, d));
                    }
                }
            }
        }
    }

    let root = |mut i: usize| {
        while parent[i] != i {
            i = parent[i];
        }
        i
    };
    let reps: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
    let labels = (0..n)
        .map(|i| {
            let r = root(i);
            reps.binary_search(&r).expect("root is active")
        })
        .collect();
    Ok(Partition::from_labels(data, labels, k))
}
