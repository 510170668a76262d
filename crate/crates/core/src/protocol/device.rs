//! Device-side local update: mixed-loss SGD, label-wise soft targets and the
//! model delta.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{DatasetStore, DeviceShard};
use crate::error::{Error, Result};
use crate::nn::{self, LossWeights, ModelDelta, ModelParams, Predictor, Sample};
use crate::soft_targets::{counts_payload_bytes, soft_payload_bytes, LabelWiseAccumulator, SoftTargetMatrix};

use super::config::{device_seed, Mode, RunConfig};
use super::schedule::rho_schedule;

/// What a device sends back after one round of local training.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundUpdate {
    pub device_id: usize,
    pub delta: ModelDelta,
    pub soft: SoftTargetMatrix,
    pub device_size: usize,
    pub upload_bytes: u64,
    pub download_bytes: u64,
    /// Mean mixed loss over every local mini-batch step.
    pub mean_loss: f64,
}

/// `(model, soft)` byte counts a device uploads in `mode`.
pub fn upload_components(mode: Mode, param_bytes: u64, num_classes: usize) -> (u64, u64) {
    let soft = soft_payload_bytes(num_classes) + counts_payload_bytes(num_classes);
    match mode {
        Mode::Dfl => (param_bytes, soft),
        Mode::FedAvg => (param_bytes, 0),
        Mode::Fd => (0, soft),
    }
}

/// `(model, soft)` byte counts the server dispatches to one device in `mode`.
pub fn download_components(mode: Mode, param_bytes: u64, num_classes: usize) -> (u64, u64) {
    let soft = soft_payload_bytes(num_classes);
    match mode {
        Mode::Dfl => (param_bytes, soft),
        Mode::FedAvg => (param_bytes, 0),
        Mode::Fd => (0, soft),
    }
}

/// Loss weights a device uses in `round`; FedAvg always trains on hard labels only.
pub fn round_weights(cfg: &RunConfig, round: usize) -> Result<LossWeights> {
    let weights = rho_schedule(round, cfg.rounds, cfg.schedule)?;
    Ok(match cfg.mode {
        Mode::FedAvg => LossWeights::hard_only(),
        _ => weights,
    })
}

/// Runs `cfg.local_epochs` epochs of mini-batch SGD from `start`, with each
/// sample's soft row taken from `soft` at its hard label, then summarises the
/// trained model's predictions label by label.
pub fn device_update(
    start: &ModelParams,
    soft: &SoftTargetMatrix,
    shard: &DeviceShard,
    store: &DatasetStore,
    cfg: &RunConfig,
    round: usize,
) -> Result<RoundUpdate> {
    if shard.is_empty() {
        return Err(Error::Validation(format!("device {} has no samples", shard.device_id)));
    }
    let weights = round_weights(cfg, round)?;
    let classes = store.num_classes();
    if soft.num_classes() != classes {
        return Err(Error::Dimension(format!(
            "soft targets cover {} classes, dataset has {classes}",
            soft.num_classes()
        )));
    }

    let mut params = start.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(device_seed(cfg.seed, shard.device_id, round));
    let mut order = shard.indices.clone();
    let mut loss_sum = 0.0;
    let mut steps = 0usize;
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| {
                let label = store.label(i);
                Sample {
                    input: store.input(i),
                    label,
                    soft: soft.row(label),
                }
            }));
            let (grad, loss) = nn::backward_with_loss(&params, &batch, weights)?;
            nn::sgd_step_in_place(&mut params, &grad, cfg.learning_rate)?;
            loss_sum += loss;
            steps += 1;
        }
    }

    let mut acc = LabelWiseAccumulator::new(classes)?;
    let mut predictor = Predictor::new(&params);
    for &i in &shard.indices {
        acc.add(predictor.probs(store.input(i))?, store.label(i))?;
    }
    let local_soft = acc.finish();

    let delta = ModelDelta::between(start, &params)?;
    let (up_model, up_soft) = upload_components(cfg.mode, delta.byte_size(), classes);
    let (down_model, down_soft) = download_components(cfg.mode, start.byte_size(), classes);
    Ok(RoundUpdate {
        device_id: shard.device_id,
        delta,
        soft: local_soft,
        device_size: shard.size(),
        upload_bytes: up_model + up_soft,
        download_bytes: down_model + down_soft,
        mean_loss: loss_sum / steps as f64,
    })
}
