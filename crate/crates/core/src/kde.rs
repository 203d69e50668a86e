//! The sample-point adaptive kernel density estimator
//! `f̂(x) = (1/n) Σᵢ K_{Hᵢ}(x − Xᵢ)` and the [`DensityModel`] interface shared
//! by estimators and exact target densities.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::kernel::{log_sum_exp_nonempty, BandwidthFactor, LN_2PI};

/// Default number of query points evaluated per chunk.
pub const DEFAULT_CHUNK_SIZE: usize = 1024;

/// `n × d` matrix of observations, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMatrix {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl SampleMatrix {
    pub fn from_flat(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("sample matrix needs at least one row"));
        }
        if d == 0 {
            return Err(Error::InvalidArgument("sample dimension must be positive".into()));
        }
        check_dim(n * d, data.len())?;
        check_finite(&data, "sample entries")?;
        Ok(Self { n, d, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows.first().ok_or(Error::Empty("sample matrix needs at least one row"))?;
        let d = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            check_dim(d, r.as_ref().len())?;
            data.extend_from_slice(r.as_ref());
        }
        Self::from_flat(rows.len(), d, data)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.d)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Rows selected by `order`, in that order.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut data = Vec::with_capacity(order.len() * self.d);
        for &i in order {
            data.extend_from_slice(self.row(i));
        }
        Self {
            n: order.len(),
            d: self.d,
            data,
        }
    }

    /// Applies `f` to every row.
    pub fn map_rows(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<Self> {
        let rows: Vec<Vec<f64>> = self.rows().map(&mut f).collect();
        Self::from_rows(&rows)
    }
}

/// A density with an exact gradient of its log.
pub trait DensityModel: Sync {
    fn dim(&self) -> usize;

    fn log_density(&self, x: &[f64]) -> Result<f64>;

    /// `∇ log f(x)`.
    fn score(&self, x: &[f64]) -> Result<Vec<f64>>;

    fn log_density_batch(&self, points: &SampleMatrix) -> Result<Vec<f64>> {
        check_dim(self.dim(), points.d())?;
        points.rows().map(|x| self.log_density(x)).collect()
    }
}

/// Sample-point adaptive KDE: one bandwidth factor per observation.
#[derive(Debug, Clone)]
pub struct SamplePointKde {
    sample: SampleMatrix,
    factors: Vec<BandwidthFactor>,
    /// `−(d/2) ln 2π − ln|Lᵢ| − ln n`, one per kernel.
    log_norms: Vec<f64>,
    chunk_size: usize,
}

impl SamplePointKde {
    pub fn new(sample: SampleMatrix, factors: Vec<BandwidthFactor>) -> Result<Self> {
        if factors.len() != sample.n() {
            return Err(Error::InvalidArgument(format!(
                "{} bandwidth factors for {} sample points",
                factors.len(),
                sample.n()
            )));
        }
        for f in &factors {
            check_dim(sample.d(), f.dim())?;
        }
        let d = sample.d() as f64;
        let ln_n = (sample.n() as f64).ln();
        let log_norms = factors
            .iter()
            .map(|f| -0.5 * d * LN_2PI - f.log_det() - ln_n)
            .collect();
        Ok(Self {
            sample,
            factors,
            log_norms,
            chunk_size: DEFAULT_CHUNK_SIZE,
        })
    }

    /// Classical fixed-bandwidth KDE: every point shares `factor`.
    pub fn global(sample: SampleMatrix, factor: BandwidthFactor) -> Result<Self> {
        let factors = vec![factor; sample.n()];
        Self::new(sample, factors)
    }

    pub fn with_chunk_size(mut self, chunk_size: usize) -> Self {
        self.chunk_size = chunk_size.max(1);
        self
    }

    pub fn sample(&self) -> &SampleMatrix {
        &self.sample
    }

    pub fn factors(&self) -> &[BandwidthFactor] {
        &self.factors
    }

    pub fn into_parts(self) -> (SampleMatrix, Vec<BandwidthFactor>) {
        (self.sample, self.factors)
    }

    /// Every factor multiplied by `c`, i.e. bandwidths `c² Hᵢ`.
    pub fn rescaled(&self, c: f64) -> Result<Self> {
        let factors = self
            .factors
            .iter()
            .map(|f| f.scaled(c))
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.sample.clone(), factors)
    }

    /// Per-kernel terms `ln K_{Hᵢ}(x − Xᵢ) − ln n` into `out`.
    fn kernel_terms(&self, x: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        for (i, (t, xi)) in out.iter_mut().zip(self.sample.rows()).enumerate() {
            for ((s, a), b) in scratch.iter_mut().zip(x).zip(xi) {
                *s = a - b;
            }
            let q = {
                self.factors[i].solve_lower_in_place(scratch);
                scratch.iter().map(|v| v * v).sum::<f64>()
            };
            *t = self.log_norms[i] - 0.5 * q;
        }
    }

    fn check_query(&self, x: &[f64]) -> Result<()> {
        check_dim(self.sample.d(), x.len())?;
        check_finite(x, "query point")
    }

    /// `log f̂(x)`.
    pub fn log_density_at(&self, x: &[f64]) -> Result<f64> {
        self.check_query(x)?;
        let mut terms = vec![0.0; self.sample.n()];
        let mut scratch = vec![0.0; self.sample.d()];
        self.kernel_terms(x, &mut terms, &mut scratch);
        Ok(log_sum_exp_nonempty(&terms))
    }

    /// `Σ_l ω_l(x) H_l⁻¹(X_l − x)` with `ω_l` normalized in the log domain.
    pub fn score_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_query(x)?;
        let (_, score) = self.log_density_and_score(x);
        Ok(score)
    }

    pub(crate) fn log_density_and_score(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let d = self.sample.d();
        let mut terms = vec![0.0; self.sample.n()];
        let mut scratch = vec![0.0; d];
        self.kernel_terms(x, &mut terms, &mut scratch);
        let lse = log_sum_exp_nonempty(&terms);
        let mut score = vec![0.0; d];
        for (i, t) in terms.iter().enumerate() {
            let w = (t - lse).exp();
            if w == 0.0 {
                continue;
            }
            for ((s, a), b) in scratch.iter_mut().zip(self.sample.row(i)).zip(x) {
                *s = a - b;
            }
            let f = &self.factors[i];
            f.solve_lower_in_place(&mut scratch);
            f.solve_upper_in_place(&mut scratch);
            for (o, v) in score.iter_mut().zip(&scratch) {
                *o += w * v;
            }
        }
        (lse, score)
    }

    /// Leave-one-out log density of sample point `i` under the other `n − 1` kernels.
    pub fn loo_log_density(&self, i: usize) -> Result<f64> {
        let n = self.sample.n();
        if n < 2 {
            return Err(Error::InvalidArgument("leave-one-out needs at least two sample points".into()));
        }
        if i >= n {
            return Err(Error::InvalidArgument(format!("index {i} out of range for {n} points")));
        }
        let d = self.sample.d();
        let xi = self.sample.row(i);
        let mut scratch = vec![0.0; d];
        let shift = (n as f64).ln() - ((n - 1) as f64).ln();
        let terms: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                for ((s, a), b) in scratch.iter_mut().zip(xi).zip(self.sample.row(j)) {
                    *s = a - b;
                }
                self.factors[j].solve_lower_in_place(&mut scratch);
                let q: f64 = scratch.iter().map(|v| v * v).sum();
                self.log_norms[j] + shift - 0.5 * q
            })
            .collect();
        Ok(log_sum_exp_nonempty(&terms))
    }

    /// Log densities at all rows of `points`, evaluated in chunks of `chunk_size` queries.
    pub fn log_density_chunked(&self, points: &SampleMatrix) -> Result<Vec<f64>> {
        check_dim(self.sample.d(), points.d())?;
        let d = points.d();
        let n = self.sample.n();
        let chunk = self.chunk_size;
        let out: Vec<Vec<f64>> = points
            .as_flat()
            .par_chunks(chunk * d)
            .map(|block| {
                let mut terms = vec![0.0; n];
                let mut scratch = vec![0.0; d];
                block
                    .chunks_exact(d)
                    .map(|x| {
                        self.kernel_terms(x, &mut terms, &mut scratch);
                        log_sum_exp_nonempty(&terms)
                    })
                    .collect()
            })
            .collect();
        Ok(out.into_iter().flatten().collect())
    }
}

impl DensityModel for SamplePointKde {
    fn dim(&self) -> usize {
        self.sample.d()
    }

    fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.log_density_at(x)
    }

    fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.score_at(x)
    }

    fn log_density_batch(&self, points: &SampleMatrix) -> Result<Vec<f64>> {
        self.log_density_chunked(points)
    }
}
