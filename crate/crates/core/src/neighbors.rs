//! Exact k-nearest-neighbour search within a sample (self excluded).
//!
//! Brute force over all pairs. Candidates are ordered by squared Euclidean
//! distance, then by sample index, so results are identical across platforms
//! and thread counts.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kde::SampleMatrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist_sq: f64,
}

impl Neighbor {
    pub fn dist(&self) -> f64 {
        self.dist_sq.sqrt()
    }
}

fn order(a: &Neighbor, b: &Neighbor) -> std::cmp::Ordering {
    a.dist_sq.total_cmp(&b.dist_sq).then(a.index.cmp(&b.index))
}

/// The `k` nearest other rows of every row, sorted by increasing distance.
pub fn k_nearest(sample: &SampleMatrix, k: usize) -> Result<Vec<Vec<Neighbor>>> {
    let n = sample.n();
    if k == 0 {
        return Err(Error::InvalidArgument("neighbour count must be at least 1".into()));
    }
    if n <= k {
        return Err(Error::InvalidArgument(format!(
            "need more than {k} sample points for {k} neighbours, got {n}"
        )));
    }
    Ok((0..n)
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(n - 1),
            |cand, i| {
                cand.clear();
                let xi = sample.row(i);
                for (j, xj) in sample.rows().enumerate() {
                    if j != i {
                        let dist_sq = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
                        cand.push(Neighbor { index: j, dist_sq });
                    }
                }
                if k < cand.len() {
                    cand.select_nth_unstable_by(k - 1, order);
                    cand.truncate(k);
                }
                cand.sort_by(order);
                cand.clone()
            },
        )
        .collect())
}

/// Smallest strictly positive distance between any two rows, if one exists.
pub fn min_positive_distance(sample: &SampleMatrix) -> Option<f64> {
    let n = sample.n();
    let best_sq = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = sample.row(i);
            let mut best = f64::INFINITY;
            for j in (i + 1)..n {
                let d2: f64 = xi.iter().zip(sample.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 > 0.0 && d2 < best {
                    best = d2;
                }
            }
            best
        })
        .reduce(|| f64::INFINITY, f64::min);
    best_sq.is_finite().then(|| best_sq.sqrt())
}
