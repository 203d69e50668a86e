//! Lower-triangular bandwidth factors and log-domain Gaussian kernels.
//!
//! A bandwidth matrix `H` is always handled through its Cholesky-type factor
//! `L` with `H = L Lᵀ`. Kernel values, gradients and determinants are
//! computed with triangular solves against `L`; no matrix is ever inverted.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Smallest diagonal entry a factor may carry.
pub const DIAGONAL_FLOOR: f64 = 1e-8;

/// Index of entry `(row, col)`, `col <= row`, in row-major packed lower storage.
#[inline]
pub fn packed_index(row: usize, col: usize) -> usize {
    debug_assert!(col <= row);
    row * (row + 1) / 2 + col
}

/// Number of packed entries of a `dim × dim` lower-triangular matrix.
#[inline]
pub fn packed_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// Lower-triangular factor `L` of a bandwidth matrix `H = L Lᵀ`.
///
/// Entries are stored row-major packed: `L[0][0], L[1][0], L[1][1], L[2][0], ...`.
/// Diagonal entries are strictly positive; values below [`DIAGONAL_FLOOR`]
/// are raised to it at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthFactor {
    dim: usize,
    entries: Vec<f64>,
}

impl BandwidthFactor {
    pub fn new(dim: usize, mut entries: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("bandwidth factor dimension must be positive".into()));
        }
        if entries.len() != packed_len(dim) {
            return Err(Error::InvalidArgument(format!(
                "a {dim}x{dim} factor needs {} packed entries, got {}",
                packed_len(dim),
                entries.len()
            )));
        }
        check_finite(&entries, "bandwidth factor entries")?;
        for j in 0..dim {
            let k = packed_index(j, j);
            if entries[k] <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "diagonal entry {j} of bandwidth factor is {} (must be > 0)",
                    entries[k]
                )));
            }
            entries[k] = entries[k].max(DIAGONAL_FLOOR);
        }
        Ok(Self { dim, entries })
    }

    pub fn identity(dim: usize) -> Self {
        Self::isotropic(dim, 1.0).expect("unit scale is valid")
    }

    /// `scale · I`.
    pub fn isotropic(dim: usize, scale: f64) -> Result<Self> {
        let mut entries = vec![0.0; packed_len(dim)];
        for j in 0..dim {
            entries[packed_index(j, j)] = scale;
        }
        Self::new(dim, entries)
    }

    /// Diagonal factor with the given standard deviations.
    pub fn diagonal(scales: &[f64]) -> Result<Self> {
        let dim = scales.len();
        let mut entries = vec![0.0; packed_len(dim)];
        for (j, &s) in scales.iter().enumerate() {
            entries[packed_index(j, j)] = s;
        }
        Self::new(dim, entries)
    }

    /// Cholesky factor of a dense row-major SPD matrix.
    pub fn from_covariance(dim: usize, cov: &[f64]) -> Result<Self> {
        check_dim(dim * dim, cov.len())?;
        check_finite(cov, "covariance matrix")?;
        let mut entries = vec![0.0; packed_len(dim)];
        for i in 0..dim {
            for j in 0..=i {
                let mut sum = cov[i * dim + j];
                for k in 0..j {
                    sum -= entries[packed_index(i, k)] * entries[packed_index(j, k)];
                }
                if i == j {
                    if sum <= 0.0 {
                        return Err(Error::InvalidArgument(format!(
                            "covariance matrix is not positive definite (pivot {i} = {sum})"
                        )));
                    }
                    entries[packed_index(i, i)] = sum.sqrt();
                } else {
                    entries[packed_index(i, j)] = sum / entries[packed_index(j, j)];
                }
            }
        }
        Self::new(dim, entries)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        if col > row {
            0.0
        } else {
            self.entries[packed_index(row, col)]
        }
    }

    /// `Σ_j ln L_jj`, i.e. `½ ln |H|`.
    pub fn log_det(&self) -> f64 {
        (0..self.dim)
            .map(|j| self.entries[packed_index(j, j)].ln())
            .sum()
    }

    /// The factor `c · L`, so that the bandwidth becomes `c² H`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidArgument(format!("factor scale must be positive, got {c}")));
        }
        Self::new(self.dim, self.entries.iter().map(|v| v * c).collect())
    }

    /// Dense row-major `L`.
    pub fn to_dense(&self) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                out[i * d + j] = self.entries[packed_index(i, j)];
            }
        }
        out
    }

    /// Dense row-major `H = L Lᵀ`.
    pub fn bandwidth_matrix(&self) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let mut s = 0.0;
                for k in 0..=j {
                    s += self.get(i, k) * self.get(j, k);
                }
                out[i * d + j] = s;
                out[j * d + i] = s;
            }
        }
        out
    }

    /// Solves `L y = z` in place (forward substitution).
    #[inline]
    pub fn solve_lower_in_place(&self, z: &mut [f64]) {
        let d = self.dim;
        let e = &self.entries;
        let mut row = 0;
        for i in 0..d {
            let mut s = z[i];
            for k in 0..i {
                s -= e[row + k] * z[k];
            }
            z[i] = s / e[row + i];
            row += i + 1;
        }
    }

    /// Solves `Lᵀ x = y` in place (back substitution).
    #[inline]
    pub fn solve_upper_in_place(&self, y: &mut [f64]) {
        let d = self.dim;
        let e = &self.entries;
        for i in (0..d).rev() {
            let mut s = y[i];
            for k in (i + 1)..d {
                s -= e[packed_index(k, i)] * y[k];
            }
            y[i] = s / e[packed_index(i, i)];
        }
    }

    /// `y = L⁻¹ z`.
    pub fn whiten(&self, z: &[f64]) -> Vec<f64> {
        let mut y = z.to_vec();
        self.solve_lower_in_place(&mut y);
        y
    }

    /// `Lᵀ v`.
    pub fn mul_transpose(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d];
        for (j, o) in out.iter_mut().enumerate() {
            *o = (j..d).map(|k| self.get(k, j) * v[k]).sum();
        }
        out
    }

    /// `L v`.
    pub fn mul(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|i| (0..=i).map(|k| self.get(i, k) * v[k]).sum())
            .collect()
    }

    /// Squared Mahalanobis norm `zᵀ H⁻¹ z = ‖L⁻¹ z‖²`, using `scratch` of length `dim`.
    #[inline]
    pub fn mahalanobis_sq_with(&self, z: &[f64], scratch: &mut [f64]) -> f64 {
        scratch.copy_from_slice(z);
        self.solve_lower_in_place(scratch);
        scratch.iter().map(|v| v * v).sum()
    }

    fn check_input(&self, z: &[f64]) -> Result<()> {
        check_dim(self.dim, z.len())?;
        check_finite(z, "kernel argument")
    }
}

/// `log K_H(z) = −(d/2) ln 2π − Σ ln L_jj − ½‖L⁻¹z‖²`.
pub fn log_gaussian_kernel(z: &[f64], factor: &BandwidthFactor) -> Result<f64> {
    factor.check_input(z)?;
    let mut y = z.to_vec();
    Ok(log_gaussian_kernel_unchecked(factor, &mut y, factor.log_det()))
}

/// Kernel log value with a precomputed log-determinant; `z` is overwritten with `L⁻¹ z`.
#[inline]
pub(crate) fn log_gaussian_kernel_unchecked(factor: &BandwidthFactor, z: &mut [f64], log_det: f64) -> f64 {
    factor.solve_lower_in_place(z);
    let q: f64 = z.iter().map(|v| v * v).sum();
    -0.5 * factor.dim() as f64 * LN_2PI - log_det - 0.5 * q
}

/// `H⁻¹(−z)`, the gradient of `log K_H` at `z`, via two triangular solves.
pub fn kernel_grad_premul(z: &[f64], factor: &BandwidthFactor) -> Result<Vec<f64>> {
    factor.check_input(z)?;
    let mut v = z.to_vec();
    factor.solve_lower_in_place(&mut v);
    factor.solve_upper_in_place(&mut v);
    for x in &mut v {
        *x = -*x;
    }
    Ok(v)
}

/// `ln Σ exp(vᵢ)` with max-shift. All-`−∞` input gives `−∞`.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("log_sum_exp needs at least one value"));
    }
    Ok(log_sum_exp_nonempty(values))
}

#[inline]
pub(crate) fn log_sum_exp_nonempty(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Terms this far below the running maximum are dropped from pruned sums.
/// `e^-50` is below 2e-22, so the relative perturbation of the sum stays under
/// `n · 2e-22`.
pub(crate) const PRUNE_GAP: f64 = 50.0;

/// Log-sum-exp that skips the `exp` for terms more than [`PRUNE_GAP`] below the maximum.
#[inline]
pub(crate) fn log_sum_exp_pruned(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    let cut = max - PRUNE_GAP;
    let mut sum = 0.0;
    for &v in values {
        if v > cut {
            sum += (v - max).exp();
        }
    }
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_factor(rng: &mut impl Rng, d: usize) -> BandwidthFactor {
        let mut e = vec![0.0; packed_len(d)];
        for i in 0..d {
            for j in 0..=i {
                e[packed_index(i, j)] = if i == j {
                    rng.random_range(0.3..2.0)
                } else {
                    rng.random_range(-0.8..0.8)
                };
            }
        }
        BandwidthFactor::new(d, e).unwrap()
    }

    fn dense_h(f: &BandwidthFactor) -> DMatrix<f64> {
        let d = f.dim();
        DMatrix::from_row_slice(d, d, &f.bandwidth_matrix())
    }

    #[test]
    fn zero_argument_standard_gaussian() {
        let v = log_gaussian_kernel(&[0.0, 0.0], &BandwidthFactor::identity(2)).unwrap();
        assert_relative_eq!(v, -(2.0 * std::f64::consts::PI).ln(), max_relative = 1e-15);
        assert_relative_eq!(v, -1.837877, epsilon = 1e-6);
    }

    #[test]
    fn one_dimensional_scaled_kernel_at_one_sigma() {
        let f = BandwidthFactor::new(1, vec![2.0]).unwrap();
        let v = log_gaussian_kernel(&[2.0], &f).unwrap();
        let expected = -(2.0f64).ln() - 0.5 * LN_2PI - 0.5;
        assert_relative_eq!(v, expected, max_relative = 1e-15);
        assert_relative_eq!(v, -2.112086, epsilon = 1e-6);
    }

    #[test]
    fn kernel_matches_dense_determinant_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let f = random_factor(&mut rng, 3);
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let h = dense_h(&f);
            let hinv = h.clone().try_inverse().unwrap();
            let zv = nalgebra::DVector::from_vec(z.clone());
            let quad = (zv.transpose() * &hinv * &zv)[(0, 0)];
            let naive = -0.5 * ((2.0 * std::f64::consts::PI).powi(3) * h.determinant()).ln() - 0.5 * quad;
            let fast = log_gaussian_kernel(&z, &f).unwrap();
            assert_relative_eq!(fast, naive, max_relative = 1e-12);
        }
    }

    #[test]
    fn grad_premul_cases() {
        let z = kernel_grad_premul(&[0.0, 0.0, 0.0], &BandwidthFactor::identity(3)).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));

        let f = BandwidthFactor::new(1, vec![2.0]).unwrap();
        assert_relative_eq!(kernel_grad_premul(&[2.0], &f).unwrap()[0], -0.5, max_relative = 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let f = random_factor(&mut rng, 3);
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let dense = dense_h(&f)
                .lu()
                .solve(&nalgebra::DVector::from_vec(z.iter().map(|v| -v).collect()))
                .unwrap();
            let fast = kernel_grad_premul(&z, &f).unwrap();
            for j in 0..3 {
                assert_relative_eq!(fast[j], dense[j], max_relative = 1e-12, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for d in 1..=4 {
            let f = random_factor(&mut rng, d);
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
            let g = kernel_grad_premul(&z, &f).unwrap();
            for j in 0..d {
                let h = 1e-5;
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[j] += h;
                zm[j] -= h;
                let fd = (log_gaussian_kernel(&zp, &f).unwrap() - log_gaussian_kernel(&zm, &f).unwrap()) / (2.0 * h);
                assert!((fd - g[j]).abs() <= 1e-6 * g[j].abs().max(1e-3), "d={d} j={j}: {fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn kernel_integrates_to_one_in_1d() {
        let sigma = 0.7;
        let f = BandwidthFactor::new(1, vec![sigma]).unwrap();
        let (a, b, m) = (-10.0 * sigma, 10.0 * sigma, 20_000);
        let h = (b - a) / m as f64;
        let mut total = 0.0;
        for i in 0..=m {
            let x = a + i as f64 * h;
            let w = if i == 0 || i == m { 0.5 } else { 1.0 };
            total += w * log_gaussian_kernel(&[x], &f).unwrap().exp();
        }
        assert!((total * h - 1.0).abs() < 1e-6);
    }

    #[test]
    fn kernel_integrates_to_one_in_2d_monte_carlo() {
        // Uniform proposal on a box covering ±8σ along both axes.
        let f = BandwidthFactor::new(2, vec![0.8, 0.3, 0.5]).unwrap();
        let half = 8.0;
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let draws = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let z = [rng.random_range(-half..half), rng.random_range(-half..half)];
            acc += log_gaussian_kernel(&z, &f).unwrap().exp();
        }
        let integral = acc / draws as f64 * (2.0 * half).powi(2);
        assert!((integral - 1.0).abs() < 0.01, "{integral}");
    }

    #[test]
    fn errors() {
        let f = BandwidthFactor::identity(2);
        assert!(matches!(log_gaussian_kernel(&[0.0], &f), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(log_gaussian_kernel(&[0.0, f64::NAN], &f), Err(Error::NonFinite(_))));
        assert!(kernel_grad_premul(&[1.0, 2.0, 3.0], &f).is_err());
        assert!(BandwidthFactor::new(2, vec![1.0, 0.0, -1.0]).is_err());
        assert!(BandwidthFactor::new(2, vec![1.0, 0.0]).is_err());
        let tiny = BandwidthFactor::new(1, vec![1e-12]).unwrap();
        assert_eq!(tiny.entries()[0], DIAGONAL_FLOOR);
    }

    #[test]
    fn log_sum_exp_cases() {
        assert_relative_eq!(log_sum_exp(&[0.0, 0.0]).unwrap(), 2f64.ln(), max_relative = 1e-15);
        assert_relative_eq!(
            log_sum_exp(&[-1000.0, -1000.0]).unwrap(),
            -1000.0 + 2f64.ln(),
            max_relative = 1e-15
        );
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]).unwrap(), f64::NEG_INFINITY);
        assert!(matches!(log_sum_exp(&[]), Err(Error::Empty(_))));
    }

    /// Compensated (Neumaier) summation of the exponentials serves as the
    /// extended-precision reference.
    fn neumaier_lse(values: &[f64]) -> f64 {
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for v in values {
            let x = v.exp();
            let t = sum + x;
            if sum.abs() >= x.abs() {
                comp += (sum - t) + x;
            } else {
                comp += (x - t) + sum;
            }
            sum = t;
        }
        (sum + comp).ln()
    }

    #[test]
    fn log_sum_exp_matches_compensated_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..200 {
            let v: Vec<f64> = (0..10).map(|_| rng.random_range(-5.0..5.0)).collect();
            assert_relative_eq!(log_sum_exp(&v).unwrap(), neumaier_lse(&v), max_relative = 1e-14);
        }
    }

    #[test]
    fn cholesky_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let f = random_factor(&mut rng, 4);
        let back = BandwidthFactor::from_covariance(4, &f.bandwidth_matrix()).unwrap();
        for (a, b) in f.entries().iter().zip(back.entries()) {
            assert_relative_eq!(a, b, max_relative = 1e-12, epsilon = 1e-13);
        }
    }

    proptest::proptest! {
        #[test]
        fn kernel_is_symmetric(
            diag in proptest::collection::vec(0.1f64..3.0, 3),
            off in proptest::collection::vec(-1.0f64..1.0, 3),
            z in proptest::collection::vec(-4.0f64..4.0, 3),
        ) {
            let f = BandwidthFactor::new(3, vec![diag[0], off[0], diag[1], off[1], off[2], diag[2]]).unwrap();
            let neg: Vec<f64> = z.iter().map(|v| -v).collect();
            let a = log_gaussian_kernel(&z, &f).unwrap();
            let b = log_gaussian_kernel(&neg, &f).unwrap();
            proptest::prop_assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0));
        }

        #[test]
        fn bandwidth_matrix_is_positive_definite(
            diag in proptest::collection::vec(0.05f64..5.0, 3),
            off in proptest::collection::vec(-2.0f64..2.0, 3),
        ) {
            let f = BandwidthFactor::new(3, vec![diag[0], off[0], diag[1], off[1], off[2], diag[2]]).unwrap();
            let h = dense_h(&f);
            let eig = h.symmetric_eigenvalues();
            proptest::prop_assert!(eig.iter().all(|&e| e > 0.0));
        }
    }
}
