use rand::seq::SliceRandom;

use super::loss::{pretrain_loss_and_grad, PretrainTask, TaskSource, TrainConfig};
use super::network::RecommenderParams;
use crate::error::{Error, Result};
use crate::rng::stream;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl AdamW {
    pub fn new(n_params: usize, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
            *p -= self.learning_rate * (update + self.weight_decay * *p);
        }
    }
}

/// Mean loss and mean gradient over a batch. `task_ids` label errors and key dropout masks.
pub fn batch_loss_and_grad(
    params: &RecommenderParams,
    tasks: &[&PretrainTask],
    task_ids: &[usize],
    cfg: &TrainConfig,
    dropout_key: Option<(u64, usize)>,
) -> Result<(f64, Vec<f64>)> {
    if tasks.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    for (task, &id) in tasks.iter().zip(task_ids) {
        let masks = dropout_key.map(|(seed, epoch)| {
            params.dropout_masks(&mut stream(seed, &["dropout".into(), epoch.into(), id.into()]))
        });
        let (l, g) = pretrain_loss_and_grad(params, task, cfg, masks.as_deref())?;
        if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { task: id });
        }
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let inv = 1.0 / tasks.len() as f64;
    grad.iter_mut().for_each(|v| *v *= inv);
    Ok((loss * inv, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: RecommenderParams,
    pub epochs: Vec<EpochStats>,
}

/// Mini-batch AdamW over `source`. One epoch visits every task once in a
/// seeded random order; `on_epoch` sees each epoch's statistics as they finish.
pub fn train(
    init: RecommenderParams,
    cfg: &TrainConfig,
    source: &dyn TaskSource,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Empty("pre-training task source"));
    }
    let mut params = init;
    let mut opt = AdamW::new(params.len(), cfg.learning_rate, cfg.weight_decay);
    let dropout = params.arch().dropout > 0.0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..source.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &["task-order".into(), epoch.into()]));
        let mut total = 0.0;
        for ids in order.chunks(cfg.batch) {
            let tasks = ids.iter().map(|&t| source.task(t)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&PretrainTask> = tasks.iter().collect();
            let key = dropout.then_some((cfg.seed, epoch));
            let (loss, grad) = batch_loss_and_grad(&params, &refs, ids, cfg, key)?;
            total += loss * ids.len() as f64;
            opt.step(params.values_mut(), &grad);
        }
        let stats = EpochStats { epoch, mean_loss: total / source.len() as f64, steps: opt.steps() };
        on_epoch(&stats);
        epochs.push(stats);
    }
    Ok(TrainOutcome { params, epochs })
}
