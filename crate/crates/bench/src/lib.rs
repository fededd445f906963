//! Shared inputs for the benchmarks.

use comrp_core::masks::Bitmask;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `k` Gaussian-ish blobs of `per` points each in `dim` dimensions.
pub fn blobs(k: usize, per: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect())
        .collect();
    Array2::from_shape_fn((k * per, dim), |(i, j)| {
        centers[i / per][j] + rng.random_range(-1.0..1.0)
    })
}

pub fn random_symmetric(n: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let v: f64 = rng.random_range(-1.0..1.0);
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
    a
}

/// A mask of random axis-aligned rectangles.
pub fn random_mask(w: u32, h: u32, rects: usize, seed: u64) -> Bitmask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Bitmask::new(w, h);
    for _ in 0..rects {
        let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
        let (x1, y1) = (rng.random_range(x0..=w), rng.random_range(y0..=h));
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(x, y, true);
            }
        }
    }
    m
}
