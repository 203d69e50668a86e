//! Neural bandwidth recommender: a small attention network maps the
//! neighbourhood of each sample point to a Cholesky factor of its bandwidth.

mod checkpoint;
mod loss;
mod neighborhoods;
mod network;
mod train;

use rayon::prelude::*;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, FORMAT_VERSION, MAGIC};
pub use loss::{
    generate_pretrain_tasks, huber, pretrain_loss, pretrain_loss_and_grad, GmdTaskSource, PretrainTask, TaskSource,
    TrainConfig,
};
pub use neighborhoods::{extract_neighborhoods, NeighborhoodMatrix};
pub use network::{ArchConfig, RecommenderParams, TensorInfo, MIN_SCALE};
pub use train::{batch_loss_and_grad, train, AdamW, EpochStats, TrainOutcome};

use crate::error::{check_dim, Result};
use crate::kde::{SampleMatrix, SamplePointKde};
use crate::kernel::BandwidthFactor;

/// Inference-mode factors for every sample point.
pub fn recommend_factors(params: &RecommenderParams, sample: &SampleMatrix) -> Result<Vec<BandwidthFactor>> {
    check_dim(params.arch().d, sample.d())?;
    let nbh = extract_neighborhoods(sample, params.arch().k_nn)?;
    nbh.par_iter().map(|m| params.recommend(m, None)).collect()
}

/// The sample-point KDE with recommended bandwidths.
pub fn recommend_all(params: &RecommenderParams, sample: &SampleMatrix) -> Result<SamplePointKde> {
    let factors = recommend_factors(params, sample)?;
    SamplePointKde::new(sample.clone(), factors)
}
