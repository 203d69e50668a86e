//! Self-exclusive leave-one-out likelihood of a sample-point KDE whose
//! bandwidths are rescaled by a common variance multiplier `s` (`Hⱼ → s Hⱼ`).
//!
//! `objective(s) = −(1/n) Σᵢ ln[(1/(n−1)) Σ_{j≠i} K_{s Hⱼ}(Xᵢ − Xⱼ)]`
//!
//! The squared Mahalanobis distances `qᵢⱼ = ‖Lⱼ⁻¹(Xᵢ − Xⱼ)‖²` do not depend on
//! `s`, so searches over `s` precompute them once when the `n × n` table fits
//! in memory.

use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::kde::SampleMatrix;
use crate::kernel::{log_sum_exp_pruned, BandwidthFactor, LN_2PI};

/// Largest sample for which the pairwise table is materialized.
pub const MAX_CACHED_POINTS: usize = 6000;

pub struct LooObjective<'a> {
    sample: &'a SampleMatrix,
    factors: &'a [BandwidthFactor],
    log_dets: Vec<f64>,
    /// Row `i` holds `q_ij` for `j ≠ i`, in increasing `j`.
    table: Option<Vec<f64>>,
}

impl<'a> LooObjective<'a> {
    pub fn new(sample: &'a SampleMatrix, factors: &'a [BandwidthFactor]) -> Result<Self> {
        let mut obj = Self::uncached(sample, factors)?;
        if sample.n() <= MAX_CACHED_POINTS {
            obj.table = Some(obj.build_table());
        }
        Ok(obj)
    }

    /// Recomputes distances on every evaluation.
    pub fn uncached(sample: &'a SampleMatrix, factors: &'a [BandwidthFactor]) -> Result<Self> {
        let n = sample.n();
        if n < 2 {
            return Err(Error::InvalidArgument("leave-one-out needs at least two sample points".into()));
        }
        if factors.len() != n {
            return Err(Error::InvalidArgument(format!("{} factors for {n} sample points", factors.len())));
        }
        for f in factors {
            check_dim(sample.d(), f.dim())?;
        }
        Ok(Self {
            sample,
            factors,
            log_dets: factors.iter().map(BandwidthFactor::log_det).collect(),
            table: None,
        })
    }

    fn row_distances(&self, i: usize, out: &mut [f64], scratch: &mut [f64]) {
        let xi = self.sample.row(i);
        let mut k = 0;
        for j in 0..self.sample.n() {
            if j == i {
                continue;
            }
            for ((s, a), b) in scratch.iter_mut().zip(xi).zip(self.sample.row(j)) {
                *s = a - b;
            }
            self.factors[j].solve_lower_in_place(scratch);
            out[k] = scratch.iter().map(|v| v * v).sum();
            k += 1;
        }
    }

    fn build_table(&self) -> Vec<f64> {
        let n = self.sample.n();
        let d = self.sample.d();
        let mut table = vec![0.0; n * (n - 1)];
        table
            .par_chunks_mut(n - 1)
            .enumerate()
            .for_each(|(i, row)| {
                let mut scratch = vec![0.0; d];
                self.row_distances(i, row, &mut scratch);
            });
        table
    }

    /// Mean leave-one-out negative log-likelihood at variance multiplier `s`.
    pub fn evaluate(&self, s: f64) -> Result<f64> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidArgument(format!("bandwidth multiplier must be positive, got {s}")));
        }
        let n = self.sample.n();
        let d = self.sample.d() as f64;
        let half_inv = 0.5 / s;
        let per_row: Vec<f64> = (0..n)
            .into_par_iter()
            .map_init(
                || (vec![0.0; n - 1], vec![0.0; n - 1], vec![0.0; self.sample.d()]),
                |(args, dist, scratch), i| {
                    let q: &[f64] = match &self.table {
                        Some(t) => &t[i * (n - 1)..(i + 1) * (n - 1)],
                        None => {
                            self.row_distances(i, dist, scratch);
                            dist
                        }
                    };
                    for (k, (a, &qk)) in args.iter_mut().zip(q).enumerate() {
                        let j = if k < i { k } else { k + 1 };
                        *a = -self.log_dets[j] - half_inv * qk;
                    }
                    log_sum_exp_pruned(args)
                },
            )
            .collect();
        let constant = -0.5 * d * LN_2PI - 0.5 * d * s.ln() - ((n - 1) as f64).ln();
        let total: f64 = per_row.iter().sum();
        Ok(-(total / n as f64 + constant))
    }
}

/// Best point of a grid search; ties go to the earlier (smaller) candidate.
pub(crate) fn argmin_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        match best {
            Some(b) if values[b] <= *v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// `count` log-spaced points on `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|k| (a + (b - a) * k as f64 / (count - 1) as f64).exp())
        .collect()
}
