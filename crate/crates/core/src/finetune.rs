//! Global scale calibration: `H_j → γ H_j` with `γ` minimizing the
//! self-exclusive leave-one-out negative log-likelihood of the sample.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kde::SampleMatrix;
use crate::kernel::BandwidthFactor;
use crate::loo::{argmin_first, log_grid, LooObjective};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    pub grid_points: usize,
    /// Absolute tolerance on `ln γ`.
    pub tolerance: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { gamma_lo: 1e-2, gamma_hi: 1e2, grid_points: 17, tolerance: 1e-4 }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_lo > 0.0 && self.gamma_lo < 1.0 && self.gamma_hi > 1.0 && self.gamma_hi.is_finite()) {
            return Err(Error::Config("fine-tune bracket must satisfy 0 < lo < 1 < hi < ∞".into()));
        }
        if self.grid_points < 3 || !(self.tolerance > 0.0) {
            return Err(Error::Config("fine-tune needs >= 3 grid points and a positive tolerance".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneResult {
    pub gamma_star: f64,
    pub objective_at_gamma_star: f64,
    pub objective_at_one: f64,
    /// Every `(γ, objective)` evaluation in order.
    pub trace: Vec<(f64, f64)>,
}

impl FinetuneResult {
    pub fn factors(&self, pre: &[BandwidthFactor]) -> Result<Vec<BandwidthFactor>> {
        let c = self.gamma_star.sqrt();
        pre.iter().map(|f| f.scaled(c)).collect()
    }
}

/// Leave-one-out objective at a single `γ`.
pub fn loo_objective(sample: &SampleMatrix, pre_factors: &[BandwidthFactor], gamma: f64) -> Result<f64> {
    LooObjective::uncached(sample, pre_factors)?.evaluate(gamma)
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

pub fn calibrate(sample: &SampleMatrix, pre_factors: &[BandwidthFactor], cfg: &FinetuneConfig) -> Result<FinetuneResult> {
    cfg.validate()?;
    let objective = LooObjective::new(sample, pre_factors)?;
    let mut trace = Vec::new();
    let eval = |log_g: f64, trace: &mut Vec<(f64, f64)>| -> Result<f64> {
        let g = log_g.exp();
        let v = objective.evaluate(g)?;
        trace.push((g, v));
        Ok(v)
    };

    let objective_at_one = eval(0.0, &mut trace)?;
    let grid: Vec<f64> = log_grid(cfg.gamma_lo, cfg.gamma_hi, cfg.grid_points).iter().map(|g| g.ln()).collect();
    let mut values = Vec::with_capacity(grid.len());
    for &lg in &grid {
        let v = eval(lg, &mut trace)?;
        if !v.is_finite() {
            return Err(Error::NonFiniteObjective { gamma: lg.exp() });
        }
        values.push(v);
    }
    if !objective_at_one.is_finite() {
        return Err(Error::NonFiniteObjective { gamma: 1.0 });
    }
    let k = argmin_first(&values).expect("grid values are finite");
    let (mut a, mut b) = (grid[k.saturating_sub(1)], grid[(k + 1).min(grid.len() - 1)]);

    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = eval(c, &mut trace)?;
    let mut fd = eval(d, &mut trace)?;
    while b - a > cfg.tolerance {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = eval(c, &mut trace)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = eval(d, &mut trace)?;
        }
    }
    let (mut best_log, mut best) = if fc <= fd { (c, fc) } else { (d, fd) };
    if values[k] < best {
        (best_log, best) = (grid[k], values[k]);
    }
    if !(best < objective_at_one) {
        (best_log, best) = (0.0, objective_at_one);
    }
    Ok(FinetuneResult { gamma_star: best_log.exp(), objective_at_gamma_star: best, objective_at_one, trace })
}
