//! Classical bandwidth selectors: Silverman's normal-reference rule,
//! likelihood cross-validation (LCV), Abramson's square-root law and
//! kNN local scaling.
//!
//! LCV and kNN search a single scalar multiplier by minimizing the mean
//! self-exclusive leave-one-out negative log-likelihood over a fixed grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kde::{SampleMatrix, SamplePointKde};
use crate::kernel::BandwidthFactor;
use crate::loo::{argmin_first, log_grid, LooObjective};
use crate::neighbors::{k_nearest, min_positive_distance};

/// Pilot densities below this are clamped before Abramson rescaling.
pub const PILOT_DENSITY_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorConfig {
    /// Multipliers of the Silverman factor searched by LCV.
    pub lcv_grid: Vec<f64>,
    /// Neighbour rank for kNN scaling; `None` means `⌈√n⌉`.
    pub knn_k: Option<usize>,
    /// Global constants `c` searched by kNN scaling.
    pub knn_scale_grid: Vec<f64>,
    pub abramson_alpha: f64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            lcv_grid: log_grid(0.1, 10.0, 31),
            knn_k: None,
            knn_scale_grid: log_grid(0.1, 10.0, 31),
            abramson_alpha: 0.5,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, grid) in [("lcv_grid", &self.lcv_grid), ("knn_scale_grid", &self.knn_scale_grid)] {
            if grid.is_empty() || grid.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
                return Err(Error::Config(format!("{name} must be non-empty with positive entries")));
            }
        }
        if self.knn_k == Some(0) {
            return Err(Error::Config("knn_k must be at least 1".into()));
        }
        if !(self.abramson_alpha.is_finite() && self.abramson_alpha >= 0.0) {
            return Err(Error::Config("abramson_alpha must be non-negative".into()));
        }
        Ok(())
    }

    pub fn knn_k_for(&self, n: usize) -> usize {
        self.knn_k.unwrap_or_else(|| (n as f64).sqrt().ceil() as usize)
    }
}

#[derive(Debug, Clone)]
pub struct LcvSelection {
    pub factor: BandwidthFactor,
    /// Selected multiplier of the Silverman factor.
    pub gamma: f64,
    pub objective: f64,
    /// LOO objective at every grid point, aligned with the grid.
    pub grid_objectives: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdaptiveSelection {
    pub factors: Vec<BandwidthFactor>,
    /// Selected global multiplier (LCV γ for Abramson, `c` for kNN).
    pub scale: f64,
    pub warnings: Vec<String>,
}

fn sample_std(sample: &SampleMatrix) -> Vec<f64> {
    let n = sample.n() as f64;
    (0..sample.d())
        .map(|j| {
            let mean = sample.rows().map(|r| r[j]).sum::<f64>() / n;
            let ss: f64 = sample.rows().map(|r| (r[j] - mean).powi(2)).sum();
            (ss / (n - 1.0)).sqrt()
        })
        .collect()
}

/// Diagonal factor `L_jj = σ̂_j · (4 / ((d + 2) n))^{1/(d+4)}`.
pub fn silverman(sample: &SampleMatrix) -> Result<BandwidthFactor> {
    let n = sample.n();
    if n < 2 {
        return Err(Error::InvalidArgument("Silverman's rule needs at least two points".into()));
    }
    let d = sample.d() as f64;
    let factor = (4.0 / ((d + 2.0) * n as f64)).powf(1.0 / (d + 4.0));
    let sd = sample_std(sample);
    if let Some(coordinate) = sd.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::DegenerateCoordinate { coordinate });
    }
    BandwidthFactor::diagonal(&sd.iter().map(|s| s * factor).collect::<Vec<_>>())
}

/// Grid search of a variance multiplier; returns `(index, objectives)`.
fn grid_search(objective: &LooObjective<'_>, grid: &[f64], variance_of: impl Fn(f64) -> f64) -> Result<(usize, Vec<f64>)> {
    let values = grid
        .iter()
        .map(|&g| objective.evaluate(variance_of(g)))
        .collect::<Result<Vec<_>>>()?;
    let best = argmin_first(&values)
        .ok_or_else(|| Error::NonFiniteObjective { gamma: grid[0] })?;
    Ok((best, values))
}

fn sorted_grid(grid: &[f64]) -> Vec<f64> {
    let mut g = grid.to_vec();
    g.sort_by(f64::total_cmp);
    g
}

/// `γ* · silverman(sample)` with `γ*` minimizing the LOO objective over `cfg.lcv_grid`.
pub fn lcv_select(sample: &SampleMatrix, cfg: &SelectorConfig) -> Result<LcvSelection> {
    cfg.validate()?;
    let base = silverman(sample)?;
    let factors = vec![base.clone(); sample.n()];
    let objective = LooObjective::new(sample, &factors)?;
    let grid = sorted_grid(&cfg.lcv_grid);
    let (best, grid_objectives) = grid_search(&objective, &grid, |g| g * g)?;
    Ok(LcvSelection {
        factor: base.scaled(grid[best])?,
        gamma: grid[best],
        objective: grid_objectives[best],
        grid_objectives,
    })
}

/// Abramson rescaling around a given global factor:
/// `λᵢ = (f̃(Xᵢ)/g)^{−α}` with `g` the geometric mean of the pilot values.
pub fn abramson_from_global(sample: &SampleMatrix, global: &BandwidthFactor, alpha: f64) -> Result<AdaptiveSelection> {
    if sample.n() < 2 {
        return Err(Error::InvalidArgument("Abramson's rule needs at least two points".into()));
    }
    let pilot = SamplePointKde::global(sample.clone(), global.clone())?;
    let mut log_pilot = pilot.log_density_chunked(sample)?;
    let floor = PILOT_DENSITY_FLOOR.ln();
    let mut warnings = Vec::new();
    for (i, v) in log_pilot.iter_mut().enumerate() {
        if !(*v >= floor) {
            warnings.push(format!("pilot density at point {i} underflowed; clamped to {PILOT_DENSITY_FLOOR:e}"));
            *v = floor;
        }
    }
    let log_g = log_pilot.iter().sum::<f64>() / log_pilot.len() as f64;
    let factors = log_pilot
        .iter()
        .map(|lp| global.scaled((-alpha * (lp - log_g)).exp()))
        .collect::<Result<Vec<_>>>()?;
    Ok(AdaptiveSelection {
        factors,
        scale: 1.0,
        warnings,
    })
}

/// Abramson adaptive KDE with an LCV pilot.
pub fn abramson_select(sample: &SampleMatrix, cfg: &SelectorConfig) -> Result<AdaptiveSelection> {
    let lcv = lcv_select(sample, cfg)?;
    let mut sel = abramson_from_global(sample, &lcv.factor, cfg.abramson_alpha)?;
    sel.scale = lcv.gamma;
    Ok(sel)
}

/// Distance from every point to its `k`-th nearest neighbour; zero distances are
/// raised to the smallest positive pairwise distance.
pub fn knn_radii(sample: &SampleMatrix, k: usize) -> Result<Vec<f64>> {
    let nn = k_nearest(sample, k)?;
    let mut radii: Vec<f64> = nn.iter().map(|row| row[k - 1].dist()).collect();
    if radii.contains(&0.0) {
        let floor = min_positive_distance(sample)
            .ok_or_else(|| Error::InvalidArgument("all sample points coincide".into()))?;
        for r in &mut radii {
            if *r == 0.0 {
                *r = floor;
            }
        }
    }
    Ok(radii)
}

/// `Hᵢ = (c rᵢ)² I` with `rᵢ` the kNN radius and `c` chosen on `cfg.knn_scale_grid`.
pub fn knn_select(sample: &SampleMatrix, cfg: &SelectorConfig) -> Result<AdaptiveSelection> {
    cfg.validate()?;
    let k = cfg.knn_k_for(sample.n());
    let radii = knn_radii(sample, k)?;
    let d = sample.d();
    let base = radii
        .iter()
        .map(|&r| BandwidthFactor::isotropic(d, r))
        .collect::<Result<Vec<_>>>()?;
    let objective = LooObjective::new(sample, &base)?;
    let grid = sorted_grid(&cfg.knn_scale_grid);
    let (best, _) = grid_search(&objective, &grid, |c| c * c)?;
    let c = grid[best];
    Ok(AdaptiveSelection {
        factors: base.iter().map(|f| f.scaled(c)).collect::<Result<Vec<_>>>()?,
        scale: c,
        warnings: Vec::new(),
    })
}
