//! Pre-training tasks and the hybrid loss
//!
//! `ℓ_t = mean_j ρ_δ(log f̂(q_j) − log f(q_j)) + λ · mean_j ‖∇log f̂(q_j) − ∇log f(q_j)‖²`
//!
//! where `f̂` is the sample-point KDE built from the recommended factors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::neighborhoods::{extract_neighborhoods, NeighborhoodMatrix};
use super::network::{RecommenderParams, Trace};
use crate::error::{check_dim, Error, Result};
use crate::kde::{DensityModel, SampleMatrix};
use crate::kernel::{log_sum_exp_nonempty, packed_index, packed_len, BandwidthFactor, LN_2PI};
use crate::rng::stream;
use crate::targets::{sample_prior, ScenarioFamily, ScenarioSpec};

const QUERY_CHUNK: usize = 16;
const POINT_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_tasks: usize,
    pub n_t: usize,
    pub m_t: usize,
    pub batch: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lambda_score: f64,
    pub huber_delta: f64,
    /// Seeds task order and dropout masks.
    pub seed: u64,
}

impl Default for TrainConfig {
    /// CPU-sized pre-training.
    fn default() -> Self {
        Self {
            n_tasks: 2000,
            n_t: 256,
            m_t: 128,
            batch: 16,
            epochs: 6,
            learning_rate: 3e-3,
            weight_decay: 1e-4,
            lambda_score: 1e-2,
            huber_delta: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The large-scale settings (GPU-sized).
    pub fn full_scale() -> Self {
        Self {
            n_tasks: 500_000,
            n_t: 2048,
            m_t: 1024,
            batch: 500,
            epochs: 1,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 || self.n_t == 0 || self.m_t == 0 || self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("training sizes must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0 && self.lambda_score >= 0.0 && self.huber_delta > 0.0) {
            return Err(Error::Config(
                "learning rate, weight decay and score weight must be >= 0, huber delta > 0".into(),
            ));
        }
        Ok(())
    }
}

/// One pre-training task: a fitting sample with its neighbourhoods and
/// labelled query points.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainTask {
    pub sample: SampleMatrix,
    pub neighborhoods: Vec<NeighborhoodMatrix>,
    pub queries: SampleMatrix,
    pub query_logf: Vec<f64>,
    pub query_scores: SampleMatrix,
}

impl PretrainTask {
    /// Labels queries with the exact density and score of `model`.
    pub fn labelled(sample: SampleMatrix, queries: SampleMatrix, model: &impl DensityModel, k_nn: usize) -> Result<Self> {
        check_dim(model.dim(), sample.d())?;
        check_dim(model.dim(), queries.d())?;
        let neighborhoods = extract_neighborhoods(&sample, k_nn)?;
        let query_logf = queries.rows().map(|q| model.log_density(q)).collect::<Result<Vec<_>>>()?;
        let mut scores = Vec::with_capacity(queries.n() * queries.d());
        for q in queries.rows() {
            scores.extend(model.score(q)?);
        }
        let query_scores = SampleMatrix::from_flat(queries.n(), queries.d(), scores)?;
        let task = Self { sample, neighborhoods, queries, query_logf, query_scores };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.neighborhoods.len() != self.sample.n() {
            return Err(Error::InvalidArgument("neighbourhoods must align with sample rows".into()));
        }
        if self.query_logf.len() != self.queries.n() || self.query_scores.n() != self.queries.n() {
            return Err(Error::InvalidArgument("labels must align with queries".into()));
        }
        check_dim(self.sample.d(), self.queries.d())?;
        check_dim(self.sample.d(), self.query_scores.d())?;
        if self.query_logf.iter().chain(self.query_scores.as_flat()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("task labels".into()));
        }
        Ok(())
    }
}

/// Random access to a (possibly virtual) collection of tasks.
pub trait TaskSource: Sync {
    fn len(&self) -> usize;
    fn task(&self, t: usize) -> Result<PretrainTask>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TaskSource for [PretrainTask] {
    fn len(&self) -> usize {
        <[PretrainTask]>::len(self)
    }

    fn task(&self, t: usize) -> Result<PretrainTask> {
        self.get(t).cloned().ok_or_else(|| Error::InvalidArgument(format!("task {t} out of range")))
    }
}

impl TaskSource for Vec<PretrainTask> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn task(&self, t: usize) -> Result<PretrainTask> {
        self.as_slice().task(t)
    }
}

/// Gaussian-mixture tasks regenerated on demand; task `t` depends only on `(spec.seed, t)`.
#[derive(Debug, Clone)]
pub struct GmdTaskSource {
    spec: ScenarioSpec,
    n_tasks: usize,
    n_t: usize,
    m_t: usize,
    k_nn: usize,
}

impl GmdTaskSource {
    pub fn new(spec: ScenarioSpec, cfg: &TrainConfig, k_nn: usize) -> Result<Self> {
        spec.validate()?;
        cfg.validate()?;
        if spec.family != ScenarioFamily::GmdF {
            return Err(Error::Config(format!("pre-training uses the GMD_F prior, not {}", spec.family)));
        }
        if cfg.n_t <= k_nn {
            return Err(Error::Config(format!("n_t = {} must exceed k_nn = {k_nn}", cfg.n_t)));
        }
        Ok(Self { spec, n_tasks: cfg.n_tasks, n_t: cfg.n_t, m_t: cfg.m_t, k_nn })
    }
}

impl TaskSource for GmdTaskSource {
    fn len(&self) -> usize {
        self.n_tasks
    }

    fn task(&self, t: usize) -> Result<PretrainTask> {
        let mut rng = stream(self.spec.seed, &["pretrain-task".into(), t.into()]);
        let model = sample_prior(&self.spec, &mut rng)?;
        let sample = model.sample(&mut rng, self.n_t)?;
        let queries = model.sample(&mut rng, self.m_t)?;
        PretrainTask::labelled(sample, queries, &model, self.k_nn)
    }
}

/// The first `cfg.n_tasks` tasks of the GMD_F prior, in order.
pub fn generate_pretrain_tasks(
    spec: ScenarioSpec,
    cfg: &TrainConfig,
    k_nn: usize,
) -> Result<impl Iterator<Item = Result<PretrainTask>>> {
    let source = GmdTaskSource::new(spec, cfg, k_nn)?;
    Ok((0..source.len()).map(move |t| source.task(t)))
}

pub fn huber(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        0.5 * r * r
    } else {
        delta * (r.abs() - 0.5 * delta)
    }
}

fn huber_slope(r: f64, delta: f64) -> f64 {
    r.clamp(-delta, delta)
}

/// Loss of a task given packed factors, and optionally `∂ℓ/∂L_l` for every kernel.
pub(crate) fn factor_loss(
    task: &PretrainTask,
    factors: &[BandwidthFactor],
    cfg: &TrainConfig,
    want_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let n = task.sample.n();
    let d = task.sample.d();
    let m = task.queries.n();
    let pl = packed_len(d);
    let inv_m = 1.0 / m as f64;
    let base = -0.5 * d as f64 * LN_2PI - (n as f64).ln();
    let log_dets: Vec<f64> = factors.iter().map(BandwidthFactor::log_det).collect();

    let partials: Vec<(f64, Option<Vec<f64>>)> = (0..m)
        .collect::<Vec<_>>()
        .par_chunks(QUERY_CHUNK)
        .map(|chunk| {
            let mut loss = 0.0;
            let mut dl = want_grad.then(|| vec![0.0; n * pl]);
            let mut ys = vec![0.0; n * d];
            let mut as_ = vec![0.0; n * d];
            let mut terms = vec![0.0; n];
            let mut scratch = vec![0.0; d];
            for &j in chunk {
                let x = task.queries.row(j);
                for l in 0..n {
                    let y = &mut ys[l * d..(l + 1) * d];
                    for ((yi, a), b) in y.iter_mut().zip(x).zip(task.sample.row(l)) {
                        *yi = a - b;
                    }
                    factors[l].solve_lower_in_place(y);
                    terms[l] = base - log_dets[l] - 0.5 * y.iter().map(|v| v * v).sum::<f64>();
                    let a = &mut as_[l * d..(l + 1) * d];
                    a.copy_from_slice(y);
                    factors[l].solve_upper_in_place(a);
                }
                let lse = log_sum_exp_nonempty(&terms);
                for t in terms.iter_mut() {
                    *t = (*t - lse).exp();
                }
                let weights = &terms;
                let mut score = vec![0.0; d];
                for (w, a) in weights.iter().zip(as_.chunks_exact(d)) {
                    for (s, v) in score.iter_mut().zip(a) {
                        *s -= w * v;
                    }
                }
                let r = lse - task.query_logf[j];
                let resid: Vec<f64> = score.iter().zip(task.query_scores.row(j)).map(|(a, b)| a - b).collect();
                loss += inv_m * (huber(r, cfg.huber_delta) + cfg.lambda_score * resid.iter().map(|v| v * v).sum::<f64>());

                let Some(dl) = dl.as_mut() else { continue };
                let hp = inv_m * huber_slope(r, cfg.huber_delta);
                let big_g: Vec<f64> = resid.iter().map(|v| 2.0 * cfg.lambda_score * inv_m * v).collect();
                let dots: Vec<f64> = as_.chunks_exact(d).map(|a| a.iter().zip(&big_g).map(|(x, y)| x * y).sum()).collect();
                let mean_dot: f64 = weights.iter().zip(&dots).map(|(w, c)| w * c).sum();
                let score_active = cfg.lambda_score != 0.0;
                for l in 0..n {
                    let w = weights[l];
                    if w == 0.0 {
                        continue;
                    }
                    let coef = w * (hp - (dots[l] - mean_dot));
                    let y = &ys[l * d..(l + 1) * d];
                    let a = &as_[l * d..(l + 1) * d];
                    let f = &factors[l];
                    let out = &mut dl[l * pl..(l + 1) * pl];
                    // p = L⁻¹G, b = L⁻ᵀp = H⁻¹G
                    let mut p = vec![0.0; d];
                    if score_active {
                        p.copy_from_slice(&big_g);
                        f.solve_lower_in_place(&mut p);
                        scratch.copy_from_slice(&p);
                        f.solve_upper_in_place(&mut scratch);
                    }
                    for i in 0..d {
                        for jj in 0..=i {
                            let idx = packed_index(i, jj);
                            let mut g = coef * a[i] * y[jj];
                            if i == jj {
                                g -= coef / f.get(i, i);
                            }
                            if score_active {
                                g += w * (scratch[i] * y[jj] + a[i] * p[jj]);
                            }
                            out[idx] += g;
                        }
                    }
                }
            }
            (loss, dl)
        })
        .collect();

    let mut loss = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; n * pl]);
    for (l, g) in partials {
        loss += l;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
    }
    (loss, grad)
}

fn forward_all(params: &RecommenderParams, task: &PretrainTask, masks: Option<&[Vec<f64>]>) -> Result<Vec<Trace>> {
    task.neighborhoods.par_iter().map(|nbh| params.forward(nbh, masks)).collect()
}

fn factors_of(params: &RecommenderParams, traces: &[Trace]) -> Result<Vec<BandwidthFactor>> {
    traces
        .iter()
        .map(|t| BandwidthFactor::new(params.arch().d, t.factor().to_vec()))
        .collect()
}

/// Hybrid loss of `params` on one task (inference mode).
pub fn pretrain_loss(params: &RecommenderParams, task: &PretrainTask, cfg: &TrainConfig) -> Result<f64> {
    task.validate()?;
    check_dim(params.arch().d, task.sample.d())?;
    let traces = forward_all(params, task, None)?;
    Ok(factor_loss(task, &factors_of(params, &traces)?, cfg, false).0)
}

/// Loss and `∂ℓ/∂θ`. `masks` (one set shared by all points) turns on dropout.
pub fn pretrain_loss_and_grad(
    params: &RecommenderParams,
    task: &PretrainTask,
    cfg: &TrainConfig,
    masks: Option<&[Vec<f64>]>,
) -> Result<(f64, Vec<f64>)> {
    task.validate()?;
    check_dim(params.arch().d, task.sample.d())?;
    let traces = forward_all(params, task, masks)?;
    let factors = factors_of(params, &traces)?;
    let (loss, dl) = factor_loss(task, &factors, cfg, true);
    let dl = dl.expect("gradient requested");
    let pl = packed_len(params.arch().d);
    let partial: Vec<Vec<f64>> = traces
        .par_chunks(POINT_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut g = vec![0.0; params.len()];
            for (k, tr) in chunk.iter().enumerate() {
                let l = c * POINT_CHUNK + k;
                params.backward(tr, &dl[l * pl..(l + 1) * pl], masks, &mut g);
            }
            g
        })
        .collect();
    let mut grad = vec![0.0; params.len()];
    for g in partial {
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kde::SamplePointKde;
    use crate::recommender::network::ArchConfig;
    use crate::targets::{GmmParams, TargetModel};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_task() -> PretrainTask {
        let sample = SampleMatrix::from_rows(&[[-1.0], [0.5], [2.0]]).unwrap();
        let queries = SampleMatrix::from_rows(&[[0.0], [1.5]]).unwrap();
        let model = TargetModel::Gmm(GmmParams::new(vec![1.0], vec![vec![0.2]], vec![BandwidthFactor::isotropic(1, 1.3).unwrap()]).unwrap());
        PretrainTask::labelled(sample, queries, &model, 1).unwrap()
    }

    #[test]
    fn toy_task_matches_independent_recomputation() {
        let task = toy_task();
        let cfg = TrainConfig { lambda_score: 0.3, huber_delta: 0.5, ..TrainConfig::default() };
        let l = [0.7, 1.1, 0.4];
        let factors: Vec<BandwidthFactor> = l.iter().map(|&v| BandwidthFactor::isotropic(1, v).unwrap()).collect();
        let (loss, _) = factor_loss(&task, &factors, &cfg, false);

        // Direct linear-domain evaluation for d = 1.
        let xs = [-1.0, 0.5, 2.0];
        let mut expected = 0.0;
        for (j, q) in [0.0f64, 1.5].iter().enumerate() {
            let mut f = 0.0;
            let mut df = 0.0;
            for k in 0..3 {
                let h2 = l[k] * l[k];
                let phi = (-(q - xs[k]).powi(2) / (2.0 * h2)).exp() / (2.0 * std::f64::consts::PI * h2).sqrt() / 3.0;
                f += phi;
                df += phi * (xs[k] - q) / h2;
            }
            let r = f.ln() - task.query_logf[j];
            let hub = if r.abs() <= 0.5 { 0.5 * r * r } else { 0.5 * (r.abs() - 0.25) };
            let sr = df / f - task.query_scores.row(j)[0];
            expected += 0.5 * (hub + 0.3 * sr * sr);
        }
        assert_relative_eq!(loss, expected, max_relative = 1e-10);
    }

    #[test]
    fn exact_fit_gives_zero_loss() {
        // A single kernel equal to the target reproduces density and score exactly.
        let target = TargetModel::Gmm(GmmParams::new(vec![1.0], vec![vec![0.0, 0.0]], vec![BandwidthFactor::new(2, vec![1.0, 0.3, 0.8]).unwrap()]).unwrap());
        let sample = SampleMatrix::from_rows(&[[0.0, 0.0], [0.0, 0.0]]).unwrap();
        let queries = SampleMatrix::from_rows(&[[0.3, -0.2], [1.0, 1.0], [-2.0, 0.5]]).unwrap();
        let task = PretrainTask::labelled(sample, queries, &target, 1).unwrap();
        let f = BandwidthFactor::new(2, vec![1.0, 0.3, 0.8]).unwrap();
        let (loss, _) = factor_loss(&task, &[f.clone(), f], &TrainConfig::default(), false);
        assert!(loss.abs() < 1e-24, "{loss}");
    }

    #[test]
    fn zero_score_weight_isolates_density_term() {
        let task = toy_task();
        let cfg = TrainConfig { lambda_score: 0.0, ..TrainConfig::default() };
        let factors: Vec<BandwidthFactor> = [0.5, 0.9, 1.4].iter().map(|&v| BandwidthFactor::isotropic(1, v).unwrap()).collect();
        let kde = SamplePointKde::new(task.sample.clone(), factors.clone()).unwrap();
        let expected = task
            .queries
            .rows()
            .zip(&task.query_logf)
            .map(|(q, lf)| huber(kde.log_density(q).unwrap() - lf, 1.0))
            .sum::<f64>()
            / 2.0;
        assert_relative_eq!(factor_loss(&task, &factors, &cfg, false).0, expected, max_relative = 1e-13);
    }

    #[test]
    fn factor_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ScenarioSpec::new(ScenarioFamily::GmdF, 2, 17).unwrap();
        let model = sample_prior(&spec, &mut rng).unwrap();
        let sample = model.sample(&mut rng, 12).unwrap();
        let queries = model.sample(&mut rng, 9).unwrap();
        let task = PretrainTask::labelled(sample, queries, &model, 3).unwrap();
        let cfg = TrainConfig { lambda_score: 0.5, huber_delta: 0.7, ..TrainConfig::default() };
        let entries: Vec<Vec<f64>> = (0..12)
            .map(|_| vec![rng.random_range(0.8..2.0), rng.random_range(-0.5..0.5), rng.random_range(0.8..2.0)])
            .collect();
        let build = |e: &[Vec<f64>]| -> Vec<BandwidthFactor> { e.iter().map(|v| BandwidthFactor::new(2, v.clone()).unwrap()).collect() };
        let (_, grad) = factor_loss(&task, &build(&entries), &cfg, true);
        let grad = grad.unwrap();
        for l in 0..12 {
            for k in 0..3 {
                let h = 1e-6;
                let mut plus = entries.clone();
                plus[l][k] += h;
                let mut minus = entries.clone();
                minus[l][k] -= h;
                let fd = (factor_loss(&task, &build(&plus), &cfg, false).0 - factor_loss(&task, &build(&minus), &cfg, false).0) / (2.0 * h);
                let an = grad[l * 3 + k];
                assert!((fd - an).abs() <= 1e-6 * fd.abs().max(an.abs()) + 1e-10, "({l},{k}): fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn task_labels_are_consistent_and_reproducible() {
        let spec = ScenarioSpec::new(ScenarioFamily::GmdF, 2, 5).unwrap();
        let cfg = TrainConfig { n_tasks: 3, n_t: 40, m_t: 10, ..TrainConfig::default() };
        let src = GmdTaskSource::new(spec, &cfg, 8).unwrap();
        let a = src.task(1).unwrap();
        assert_eq!(a, src.task(1).unwrap());
        assert_ne!(a.sample, src.task(2).unwrap().sample);
        assert_eq!(a.sample.n(), 40);
        assert_eq!(a.queries.n(), 10);
        let mut rng = stream(5, &["pretrain-task".into(), 1usize.into()]);
        let model = sample_prior(&spec, &mut rng).unwrap();
        for (j, q) in a.queries.rows().enumerate() {
            for c in 0..2 {
                let h = 1e-5;
                let mut p = q.to_vec();
                let mut m = q.to_vec();
                p[c] += h;
                m[c] -= h;
                let fd = (model.log_density(&p).unwrap() - model.log_density(&m).unwrap()) / (2.0 * h);
                let an = a.query_scores.row(j)[c];
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0));
            }
        }
        assert_eq!(generate_pretrain_tasks(spec, &cfg, 8).unwrap().count(), 3);
        let banana = ScenarioSpec::new(ScenarioFamily::Banana, 2, 0).unwrap();
        assert!(GmdTaskSource::new(banana, &cfg, 8).is_err());
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let arch = ArchConfig { d: 2, k_nn: 4, hidden: 4, n_blocks: 1, n_heads: 1, ..ArchConfig::desk(2) };
        let params = RecommenderParams::init(arch, &mut rng).unwrap();
        let spec = ScenarioSpec::new(ScenarioFamily::GmdF, 2, 3).unwrap();
        let cfg = TrainConfig { n_tasks: 1, n_t: 20, m_t: 12, ..TrainConfig::default() };
        let task = GmdTaskSource::new(spec, &cfg, 4).unwrap().task(0).unwrap();
        let (_, grad) = pretrain_loss_and_grad(&params, &task, &cfg, None).unwrap();
        for i in 0..params.len() {
            let h = 1e-5;
            let mut p = params.clone();
            p.values_mut()[i] += h;
            let mut m = params.clone();
            m.values_mut()[i] -= h;
            let fd = (pretrain_loss(&p, &task, &cfg).unwrap() - pretrain_loss(&m, &task, &cfg).unwrap()) / (2.0 * h);
            let err = (fd - grad[i]).abs() / (fd.abs().max(grad[i].abs()) + 1e-8);
            assert!(err < 1e-4, "param {i}: fd {fd} vs {}", grad[i]);
        }
    }
}
