//! Synthetic target families with exact samplers, log densities and scores:
//! Gaussian mixtures (two eigenvalue regimes), the banana family and the
//! noisy torus family.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::kde::{DensityModel, SampleMatrix};
use crate::kernel::{kernel_grad_premul, log_gaussian_kernel, log_sum_exp_nonempty, BandwidthFactor, LN_2PI};

/// Scenario families used for pre-training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioFamily {
    #[serde(rename = "GMD_F")]
    GmdF,
    #[serde(rename = "GMD_F_PLUS")]
    GmdFPlus,
    #[serde(rename = "BANANA")]
    Banana,
    #[serde(rename = "NOISY_TORUS")]
    NoisyTorus,
}

impl ScenarioFamily {
    pub const ALL: [ScenarioFamily; 4] = [Self::GmdF, Self::GmdFPlus, Self::Banana, Self::NoisyTorus];

    pub fn tag(self) -> &'static str {
        match self {
            Self::GmdF => "GMD_F",
            Self::GmdFPlus => "GMD_F_PLUS",
            Self::Banana => "BANANA",
            Self::NoisyTorus => "NOISY_TORUS",
        }
    }

    pub fn min_dim(self) -> usize {
        match self {
            Self::GmdF | Self::GmdFPlus => 1,
            Self::Banana | Self::NoisyTorus => 2,
        }
    }
}

impl fmt::Display for ScenarioFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ScenarioFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown scenario family {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub family: ScenarioFamily,
    pub d: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(family: ScenarioFamily, d: usize, seed: u64) -> Result<Self> {
        let spec = Self { family, d, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < self.family.min_dim() {
            return Err(Error::InvalidArgument(format!(
                "{} needs d >= {}, got {}",
                self.family,
                self.family.min_dim(),
                self.d
            )));
        }
        Ok(())
    }
}

/// Mixture `Σ w_k N(μ_k, L_k L_kᵀ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub cov_factors: Vec<BandwidthFactor>,
}

impl GmmParams {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, cov_factors: Vec<BandwidthFactor>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::Empty("mixture needs at least one component"));
        }
        if means.len() != k || cov_factors.len() != k {
            return Err(Error::InvalidArgument("mixture weights, means and factors must align".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument("mixture weights must be a probability vector".into()));
        }
        let d = means[0].len();
        for (m, f) in means.iter().zip(&cov_factors) {
            check_dim(d, m.len())?;
            check_dim(d, f.dim())?;
            check_finite(m, "mixture mean")?;
        }
        Ok(Self { weights, means, cov_factors })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    fn component_terms(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = vec![0.0; x.len()];
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.cov_factors)
            .map(|((w, m), f)| {
                for ((zi, a), b) in z.iter_mut().zip(x).zip(m) {
                    *zi = a - b;
                }
                Ok(w.ln() + log_gaussian_kernel(&z, f)?)
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        Ok(log_sum_exp_nonempty(&self.component_terms(x)?))
    }

    /// `Σ_k r_k(x) Σ_k⁻¹(μ_k − x)` with responsibilities `r_k`.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        let terms = self.component_terms(x)?;
        let lse = log_sum_exp_nonempty(&terms);
        let mut out = vec![0.0; x.len()];
        for (k, t) in terms.iter().enumerate() {
            let r = (t - lse).exp();
            if r == 0.0 {
                continue;
            }
            let z: Vec<f64> = x.iter().zip(&self.means[k]).map(|(a, b)| a - b).collect();
            for (o, g) in out.iter_mut().zip(kernel_grad_premul(&z, &self.cov_factors[k])?) {
                *o += r * g;
            }
        }
        Ok(out)
    }

    pub fn sample(&self, rng: &mut impl Rng, n: usize) -> Vec<f64> {
        let d = self.dim();
        let mut cumulative = Vec::with_capacity(self.weights.len());
        let mut acc = 0.0;
        for w in &self.weights {
            acc += w;
            cumulative.push(acc);
        }
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            let u: f64 = rng.random::<f64>() * acc;
            let k = cumulative.iter().position(|&c| u < c).unwrap_or(cumulative.len() - 1);
            let eps: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let shifted = self.cov_factors[k].mul(&eps);
            out.extend(shifted.iter().zip(&self.means[k]).map(|(a, b)| a + b));
        }
        out
    }
}

/// `x₁ ~ N(0, σ₁²)`, `x_k | x_{k−1} ~ N(b(x_{k−1}² − σ_{k−1}²), σ_k²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BananaParams {
    pub b: f64,
    pub sigmas: Vec<f64>,
}

impl BananaParams {
    pub fn new(b: f64, sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.is_empty() || sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) || !b.is_finite() {
            return Err(Error::InvalidArgument("banana needs finite b and positive sigmas".into()));
        }
        Ok(Self { b, sigmas })
    }

    pub fn dim(&self) -> usize {
        self.sigmas.len()
    }

    fn conditional_mean(&self, x: &[f64], k: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            self.b * (x[k - 1] * x[k - 1] - self.sigmas[k - 1] * self.sigmas[k - 1])
        }
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        check_finite(x, "query point")?;
        Ok((0..self.dim())
            .map(|k| {
                let s = self.sigmas[k];
                let r = (x[k] - self.conditional_mean(x, k)) / s;
                -0.5 * LN_2PI - s.ln() - 0.5 * r * r
            })
            .sum())
    }

    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        check_finite(x, "query point")?;
        let d = self.dim();
        let resid: Vec<f64> = (0..d)
            .map(|k| (x[k] - self.conditional_mean(x, k)) / (self.sigmas[k] * self.sigmas[k]))
            .collect();
        Ok((0..d)
            .map(|k| {
                let feedback = if k + 1 < d { resid[k + 1] * 2.0 * self.b * x[k] } else { 0.0 };
                -resid[k] + feedback
            })
            .collect())
    }

    pub fn sample(&self, rng: &mut impl Rng, n: usize) -> Vec<f64> {
        let d = self.dim();
        let mut out = Vec::with_capacity(n * d);
        let mut x = vec![0.0; d];
        for _ in 0..n {
            for k in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                x[k] = self.conditional_mean(&x, k) + self.sigmas[k] * z;
            }
            out.extend_from_slice(&x);
        }
        out
    }
}

/// Below this radius a circular block is evaluated at the radius itself.
pub const TORUS_RADIUS_GUARD: f64 = 1e-8;

/// `X = μ + Q Y` with `Y` made of noisy circles of radii `R_j` followed by
/// `N(0, σ_⊥²)` coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorusParams {
    pub radii: Vec<f64>,
    pub sigma_r: f64,
    pub sigma_perp: f64,
    /// Row-major `d × d` orthogonal matrix.
    pub rotation: Vec<f64>,
    pub shift: Vec<f64>,
}

impl TorusParams {
    pub fn new(radii: Vec<f64>, sigma_r: f64, sigma_perp: f64, rotation: Vec<f64>, shift: Vec<f64>) -> Result<Self> {
        let d = shift.len();
        if radii.is_empty() || radii.len() > 2 || 2 * radii.len() > d {
            return Err(Error::InvalidArgument(format!("{} circular blocks do not fit in d = {d}", radii.len())));
        }
        if radii.iter().any(|r| !(*r >= 0.25)) || !(sigma_r > 0.0) || !(sigma_perp > 0.0) {
            return Err(Error::InvalidArgument("torus radii must be >= 0.25 and noise levels positive".into()));
        }
        check_dim(d * d, rotation.len())?;
        let q = DMatrix::from_row_slice(d, d, &rotation);
        let err = (q.transpose() * &q - DMatrix::identity(d, d)).norm();
        if err > 1e-10 {
            return Err(Error::InvalidArgument(format!("rotation is not orthogonal (|QᵀQ − I| = {err:e})")));
        }
        Ok(Self { radii, sigma_r, sigma_perp, rotation, shift })
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    /// `Qᵀ(x − μ)`.
    fn to_latent(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|j| (0..d).map(|i| self.rotation[i * d + j] * (x[i] - self.shift[i])).sum())
            .collect()
    }

    /// Log density and `d/ds` of one folded circular block at radius `s`.
    fn block_terms(&self, s: f64, radius: f64) -> (f64, f64) {
        let var = self.sigma_r * self.sigma_r;
        let s = s.max(TORUS_RADIUS_GUARD);
        let a = 2.0 * s * radius / var;
        let fold = (-a).exp();
        let log = -(2.0 * std::f64::consts::PI * s).ln() - 0.5 * LN_2PI - self.sigma_r.ln()
            - (s - radius).powi(2) / (2.0 * var)
            + fold.ln_1p();
        let far = fold / (1.0 + fold);
        let slope = -1.0 / s - (s - radius) / var - 2.0 * radius / var * far;
        (log, slope)
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        check_finite(x, "query point")?;
        let y = self.to_latent(x);
        let mut total = 0.0;
        for (j, &r) in self.radii.iter().enumerate() {
            let s = y[2 * j].hypot(y[2 * j + 1]);
            total += self.block_terms(s, r).0;
        }
        let sp = self.sigma_perp;
        for &v in &y[2 * self.radii.len()..] {
            total += -0.5 * LN_2PI - sp.ln() - 0.5 * (v / sp).powi(2);
        }
        Ok(total)
    }

    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        check_finite(x, "query point")?;
        let d = self.dim();
        let y = self.to_latent(x);
        let mut gy = vec![0.0; d];
        for (j, &r) in self.radii.iter().enumerate() {
            let (a, b) = (y[2 * j], y[2 * j + 1]);
            let s = a.hypot(b);
            if s < TORUS_RADIUS_GUARD {
                continue;
            }
            let slope = self.block_terms(s, r).1;
            gy[2 * j] = slope * a / s;
            gy[2 * j + 1] = slope * b / s;
        }
        let var = self.sigma_perp * self.sigma_perp;
        for k in 2 * self.radii.len()..d {
            gy[k] = -y[k] / var;
        }
        Ok((0..d).map(|i| (0..d).map(|j| self.rotation[i * d + j] * gy[j]).sum()).collect())
    }

    pub fn sample(&self, rng: &mut impl Rng, n: usize) -> Vec<f64> {
        let d = self.dim();
        let angle = Uniform::new(0.0, 2.0 * std::f64::consts::PI).expect("valid range");
        let mut out = Vec::with_capacity(n * d);
        let mut y = vec![0.0; d];
        for _ in 0..n {
            for (j, &r) in self.radii.iter().enumerate() {
                let theta = angle.sample(rng);
                let z: f64 = StandardNormal.sample(rng);
                let t = r + self.sigma_r * z;
                y[2 * j] = t * theta.cos();
                y[2 * j + 1] = t * theta.sin();
            }
            for v in &mut y[2 * self.radii.len()..] {
                let z: f64 = StandardNormal.sample(rng);
                *v = self.sigma_perp * z;
            }
            for i in 0..d {
                out.push(self.shift[i] + (0..d).map(|j| self.rotation[i * d + j] * y[j]).sum::<f64>());
            }
        }
        out
    }
}

/// A target distribution with exact oracle density and score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family")]
pub enum TargetModel {
    Gmm(GmmParams),
    Banana(BananaParams),
    Torus(TorusParams),
}

impl TargetModel {
    pub fn sample(&self, rng: &mut impl Rng, n: usize) -> Result<SampleMatrix> {
        let data = match self {
            TargetModel::Gmm(p) => p.sample(rng, n),
            TargetModel::Banana(p) => p.sample(rng, n),
            TargetModel::Torus(p) => p.sample(rng, n),
        };
        SampleMatrix::from_flat(n, self.dim(), data)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

impl DensityModel for TargetModel {
    fn dim(&self) -> usize {
        match self {
            TargetModel::Gmm(p) => p.dim(),
            TargetModel::Banana(p) => p.dim(),
            TargetModel::Torus(p) => p.dim(),
        }
    }

    fn log_density(&self, x: &[f64]) -> Result<f64> {
        match self {
            TargetModel::Gmm(p) => p.log_density(x),
            TargetModel::Banana(p) => p.log_density(x),
            TargetModel::Torus(p) => p.log_density(x),
        }
    }

    fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            TargetModel::Gmm(p) => p.score(x),
            TargetModel::Banana(p) => p.score(x),
            TargetModel::Torus(p) => p.score(x),
        }
    }
}

/// Haar-distributed orthogonal matrix (row-major): QR of a Gaussian matrix with
/// the signs of `R`'s diagonal folded into `Q`.
pub fn haar_rotation(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            out.push(q[(i, j)]);
        }
    }
    out
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..=hi)
}

fn dirichlet(rng: &mut impl Rng, k: usize, alpha: f64) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("valid Gamma parameters");
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            let mut w: Vec<f64> = draws.iter().map(|g| g / total).collect();
            // Renormalize once more so the sum is 1 to the last ulp we can get.
            let s: f64 = w.iter().sum();
            for v in &mut w {
                *v /= s;
            }
            return w;
        }
    }
}

/// Prior ranges of the Gaussian-mixture families.
pub const GMM_MAX_COMPONENTS: usize = 8;
pub const GMM_DIRICHLET_ALPHA: f64 = 0.8;
pub const GMM_MEAN_RANGE: (f64, f64) = (-10.0, 10.0);
pub const GMD_F_EIGEN_RANGE: (f64, f64) = (0.25, 2.5);
pub const GMD_F_PLUS_EIGEN_RANGE: (f64, f64) = (0.15, 0.25);

fn sample_gmm(rng: &mut impl Rng, d: usize, eigen: (f64, f64)) -> Result<GmmParams> {
    let k = rng.random_range(1..=GMM_MAX_COMPONENTS);
    let weights = dirichlet(rng, k, GMM_DIRICHLET_ALPHA);
    let means = (0..k)
        .map(|_| (0..d).map(|_| uniform(rng, GMM_MEAN_RANGE.0, GMM_MEAN_RANGE.1)).collect())
        .collect();
    let mut factors = Vec::with_capacity(k);
    for _ in 0..k {
        let lambda: Vec<f64> = (0..d).map(|_| uniform(rng, eigen.0, eigen.1)).collect();
        let q = haar_rotation(d, rng);
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] = (0..d).map(|m| q[i * d + m] * lambda[m] * q[j * d + m]).sum();
            }
        }
        for i in 0..d {
            for j in 0..i {
                let avg = 0.5 * (cov[i * d + j] + cov[j * d + i]);
                cov[i * d + j] = avg;
                cov[j * d + i] = avg;
            }
        }
        factors.push(BandwidthFactor::from_covariance(d, &cov)?);
    }
    GmmParams::new(weights, means, factors)
}

/// Draws one target model from the prior of `spec.family` (seeded by `rng`).
pub fn sample_prior(spec: &ScenarioSpec, rng: &mut impl Rng) -> Result<TargetModel> {
    spec.validate()?;
    let d = spec.d;
    Ok(match spec.family {
        ScenarioFamily::GmdF => TargetModel::Gmm(sample_gmm(rng, d, GMD_F_EIGEN_RANGE)?),
        ScenarioFamily::GmdFPlus => TargetModel::Gmm(sample_gmm(rng, d, GMD_F_PLUS_EIGEN_RANGE)?),
        ScenarioFamily::Banana => {
            let b = uniform(rng, 0.08, 0.35);
            let sigmas = (0..d).map(|_| uniform(rng, 0.05, 0.30)).collect();
            TargetModel::Banana(BananaParams::new(b, sigmas)?)
        }
        ScenarioFamily::NoisyTorus => {
            let blocks = if d < 4 { 1 } else { 2 };
            let sigma_r = uniform(rng, 0.03, 0.06);
            let sigma_perp = uniform(rng, 0.004, 0.012);
            let outer = uniform(rng, 2.0, 3.2);
            let radii = if blocks == 1 {
                vec![outer]
            } else {
                let gap = uniform(rng, 1.0, 1.8);
                vec![outer, (outer - gap).max(0.25)]
            };
            let rotation = haar_rotation(d, rng);
            let shift = (0..d).map(|_| uniform(rng, -1.0, 1.0)).collect();
            TargetModel::Torus(TorusParams::new(radii, sigma_r, sigma_perp, rotation, shift)?)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_check(model: &TargetModel, x: &[f64], tol: f64) {
        let g = model.score(x).unwrap();
        for j in 0..x.len() {
            let h = 1e-5;
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let fd = (model.log_density(&xp).unwrap() - model.log_density(&xm).unwrap()) / (2.0 * h);
            let scale = g.iter().map(|v| v.abs()).fold(1e-2, f64::max);
            assert!((fd - g[j]).abs() <= tol * scale, "coord {j}: fd {fd} vs analytic {}", g[j]);
        }
    }

    #[test]
    fn gmd_f_prior_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let m = sample_prior(&ScenarioSpec::new(ScenarioFamily::GmdF, 2, 0).unwrap(), &mut rng).unwrap();
            let TargetModel::Gmm(p) = m else { panic!("expected mixture") };
            assert!((1..=8).contains(&p.n_components()));
            assert!(p.means.iter().flatten().all(|v| v.abs() <= 10.0));
            for f in &p.cov_factors {
                let h = DMatrix::from_row_slice(2, 2, &f.bandwidth_matrix());
                for e in h.symmetric_eigenvalues().iter() {
                    assert!(*e >= 0.25 - 1e-9 && *e <= 2.5 + 1e-9, "{e}");
                }
            }
            assert!((p.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn gmd_f_plus_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = sample_prior(&ScenarioSpec::new(ScenarioFamily::GmdFPlus, 3, 0).unwrap(), &mut rng).unwrap();
        let TargetModel::Gmm(p) = m else { panic!() };
        for f in &p.cov_factors {
            let h = DMatrix::from_row_slice(3, 3, &f.bandwidth_matrix());
            for e in h.symmetric_eigenvalues().iter() {
                assert!(*e >= 0.15 - 1e-9 && *e <= 0.25 + 1e-9);
            }
        }
    }

    #[test]
    fn torus_block_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (d, blocks) in [(2, 1), (3, 1), (4, 2), (7, 2)] {
            let m = sample_prior(&ScenarioSpec::new(ScenarioFamily::NoisyTorus, d, 0).unwrap(), &mut rng).unwrap();
            let TargetModel::Torus(p) = m else { panic!() };
            assert_eq!(p.radii.len(), blocks);
            assert_eq!(d - 2 * blocks, if d == 4 { 0 } else { d - 2 * blocks });
            assert!(p.radii[0] >= 2.0 && p.radii[0] <= 3.2);
            assert!(p.radii.iter().all(|&r| r >= 0.25));
            assert!(p.sigma_r >= 0.03 && p.sigma_r <= 0.06);
            assert!(p.sigma_perp >= 0.004 && p.sigma_perp <= 0.012);
            assert!(p.shift.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn banana_prior_ranges_and_dimension_guard() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = sample_prior(&ScenarioSpec::new(ScenarioFamily::Banana, 5, 0).unwrap(), &mut rng).unwrap();
        let TargetModel::Banana(p) = m else { panic!() };
        assert!(p.b >= 0.08 && p.b <= 0.35);
        assert!(p.sigmas.iter().all(|&s| (0.05..=0.30).contains(&s)));
        assert!(ScenarioSpec::new(ScenarioFamily::Banana, 1, 0).is_err());
        assert!(ScenarioSpec::new(ScenarioFamily::NoisyTorus, 1, 0).is_err());
        assert!(ScenarioSpec::new(ScenarioFamily::GmdF, 1, 0).is_ok());
    }

    #[test]
    fn prior_is_deterministic_given_seed() {
        for fam in ScenarioFamily::ALL {
            let spec = ScenarioSpec::new(fam, 3, 9).unwrap();
            let a = sample_prior(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            let b = sample_prior(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn standard_normal_mixture_mode() {
        let m = TargetModel::Gmm(GmmParams::new(vec![1.0], vec![vec![0.0, 0.0]], vec![BandwidthFactor::identity(2)]).unwrap());
        assert_relative_eq!(m.log_density(&[0.0, 0.0]).unwrap(), -1.8378770664093453, max_relative = 1e-15);
        assert!(m.score(&[0.0, 0.0]).unwrap().iter().all(|v| *v == 0.0));

        let off = TargetModel::Gmm(
            GmmParams::new(vec![1.0], vec![vec![1.0, -2.0]], vec![BandwidthFactor::new(2, vec![1.0, 0.5, 0.7]).unwrap()]).unwrap(),
        );
        assert!(off.score(&[1.0, -2.0]).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn mixture_score_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = ScenarioSpec::new(ScenarioFamily::GmdF, 2, 0).unwrap();
        for _ in 0..20 {
            let m = sample_prior(&spec, &mut rng).unwrap();
            let x = m.sample(&mut rng, 1).unwrap();
            fd_check(&m, x.row(0), 1e-6);
        }
    }

    #[test]
    fn banana_zero_curvature() {
        let m = TargetModel::Banana(BananaParams::new(0.0, vec![1.0, 1.0]).unwrap());
        assert_relative_eq!(m.log_density(&[0.0, 0.0]).unwrap(), -1.8378770664093453, max_relative = 1e-15);
        let p = BananaParams::new(0.0, vec![0.5, 2.0, 1.5]).unwrap();
        let x = [0.3, -1.2, 2.0];
        let s = p.score(&x).unwrap();
        for k in 0..3 {
            assert_relative_eq!(s[k], -x[k] / p.sigmas[k].powi(2), max_relative = 1e-15);
        }
    }

    #[test]
    fn banana_score_and_normalization() {
        let m = TargetModel::Banana(BananaParams::new(0.2, vec![0.8, 0.5, 0.3]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            fd_check(&m, &x, 1e-6);
        }
        // Importance check with a wide Gaussian proposal: E_q[f/q] = 1.
        let scale = [2.5, 2.0, 1.5];
        let draws = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let mut x = [0.0; 3];
            let mut log_q = 0.0;
            for k in 0..3 {
                let z: f64 = StandardNormal.sample(&mut rng);
                x[k] = scale[k] * z;
                log_q += -0.5 * LN_2PI - f64::ln(scale[k]) - 0.5 * z * z;
            }
            acc += (m.log_density(&x).unwrap() - log_q).exp();
        }
        let integral = acc / draws as f64;
        assert!((integral - 1.0).abs() < 0.01, "{integral}");
    }

    fn planar_torus(radius: f64, sigma_r: f64) -> TorusParams {
        TorusParams::new(vec![radius], sigma_r, 0.01, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap()
    }

    #[test]
    fn torus_value_on_circle() {
        let p = planar_torus(2.5, 0.05);
        let v = p.log_density(&[2.5, 0.0]).unwrap();
        let expected = (1.0 / (2.0 * std::f64::consts::PI * 2.5)).ln()
            + (1.0 / (0.05 * (2.0 * std::f64::consts::PI).sqrt())).ln()
            + (-2.0 * 2.5f64.powi(2) / 0.05f64.powi(2)).exp().ln_1p();
        assert_relative_eq!(v, expected, max_relative = 1e-14);
        assert_relative_eq!(v, -0.6773, epsilon = 1e-4);
    }

    #[test]
    fn torus_integrates_to_one_on_grid() {
        // Wide radial noise keeps the ring resolvable on a modest grid.
        let p = planar_torus(2.0, 0.3);
        let (lo, hi, m) = (-6.0, 6.0, 2400);
        let h = (hi - lo) / m as f64;
        let mut total = 0.0;
        for i in 0..m {
            for j in 0..m {
                let x = [lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h];
                total += p.log_density(&x).unwrap().exp();
            }
        }
        assert!((total * h * h - 1.0).abs() < 1e-3, "{}", total * h * h);
    }

    #[test]
    fn torus_rotation_and_translation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = ScenarioSpec::new(ScenarioFamily::NoisyTorus, 5, 0).unwrap();
        let TargetModel::Torus(p) = sample_prior(&spec, &mut rng).unwrap() else { panic!() };
        let canonical = TorusParams::new(
            p.radii.clone(),
            p.sigma_r,
            p.sigma_perp,
            DMatrix::<f64>::identity(5, 5).transpose().as_slice().to_vec(),
            vec![0.0; 5],
        )
        .unwrap();
        let x = TargetModel::Torus(p.clone()).sample(&mut rng, 5).unwrap();
        for row in x.rows() {
            let y = p.to_latent(row);
            assert_relative_eq!(p.log_density(row).unwrap(), canonical.log_density(&y).unwrap(), max_relative = 1e-12);
        }
    }

    #[test]
    fn torus_score_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for d in 2..=5 {
            let spec = ScenarioSpec::new(ScenarioFamily::NoisyTorus, d, 0).unwrap();
            let m = sample_prior(&spec, &mut rng).unwrap();
            let x = m.sample(&mut rng, 10).unwrap();
            for row in x.rows() {
                fd_check(&m, row, 1e-5);
            }
        }
    }

    #[test]
    fn torus_origin_is_guarded() {
        let p = planar_torus(0.5, 0.2);
        assert!(p.log_density(&[0.0, 0.0]).unwrap().is_finite());
        assert!(p.score(&[0.0, 0.0]).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn haar_rotation_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let q1 = haar_rotation(1, &mut rng);
        assert!(q1[0] == 1.0 || q1[0] == -1.0);
        let d = 50;
        let q = DMatrix::from_row_slice(d, d, &haar_rotation(d, &mut rng));
        assert!((q.transpose() * &q - DMatrix::identity(d, d)).norm() < 1e-12);
        for c in q.column_iter() {
            assert_relative_eq!(c.norm(), 1.0, max_relative = 1e-13);
        }
    }

    #[test]
    fn toml_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for fam in ScenarioFamily::ALL {
            let m = sample_prior(&ScenarioSpec::new(fam, 4, 0).unwrap(), &mut rng).unwrap();
            let text = m.to_toml().unwrap();
            assert_eq!(TargetModel::from_toml(&text).unwrap(), m);
        }
    }

    #[test]
    fn family_tags_parse() {
        for fam in ScenarioFamily::ALL {
            assert_eq!(fam.tag().parse::<ScenarioFamily>().unwrap(), fam);
        }
        assert!("GMD".parse::<ScenarioFamily>().is_err());
    }
}
