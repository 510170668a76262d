//! Cloud-server side: device selection, delta aggregation, the round loop
//! and evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{DatasetStore, DeviceShard};
use crate::error::{Error, Result};
use crate::nn::{self, ModelParams, Predictor};
use crate::soft_targets::{aggregate_soft_targets, init_soft_targets, SoftTargetMatrix};

use super::config::{Mode, RunConfig};
use super::device::{device_update, download_components, round_weights, upload_components, RoundUpdate};
use super::ledger::{CommLedger, RoundTraffic};
use super::metrics::RoundMetrics;

/// Number of devices drawn per round: `max(round_half_up(c * N), 1)`, capped at `N`.
pub fn selection_size(num_devices: usize, fraction: f64) -> usize {
    let k = (fraction * num_devices as f64 + 0.5).floor() as usize;
    k.max(1).min(num_devices)
}

/// Uniform sample of distinct device ids, returned in ascending order.
pub fn select_devices<R: Rng + ?Sized>(num_devices: usize, fraction: f64, rng: &mut R) -> Vec<usize> {
    let k = selection_size(num_devices, fraction);
    let mut picked = rand::seq::index::sample(rng, num_devices, k).into_vec();
    picked.sort_unstable();
    picked
}

/// Size-weighted mean of the deltas applied to `current`, folded in
/// ascending device id order.
pub fn aggregate_deltas(updates: &[RoundUpdate], current: &ModelParams) -> Result<ModelParams> {
    if updates.is_empty() {
        return Err(Error::Protocol("no device updates to aggregate".into()));
    }
    let mut ordered: Vec<&RoundUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.device_id);

    let mut acc = vec![0.0; current.len()];
    let mut total = 0.0;
    for u in ordered {
        current.ensure_congruent(u.delta.as_params())?;
        let w = u.device_size as f64;
        total += w;
        for (a, d) in acc.iter_mut().zip(u.delta.as_slice()) {
            *a += w * d;
        }
    }
    if total <= 0.0 {
        return Err(Error::Protocol("aggregated device sizes sum to zero".into()));
    }
    let data = current.as_slice().iter().zip(&acc).map(|(w, a)| w + a / total).collect();
    ModelParams::from_flat(current.dims(), data)
}

/// Argmax accuracy; ties resolve to the lowest class index.
pub fn evaluate(params: &ModelParams, test: &DatasetStore) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Validation("cannot evaluate on an empty test store".into()));
    }
    let mut predictor = Predictor::new(params);
    let mut correct = 0usize;
    for i in 0..test.len() {
        if nn::argmax(predictor.probs(test.input(i))?) == test.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Mean of the per-model accuracies.
pub fn evaluate_mean(models: &[ModelParams], test: &DatasetStore) -> Result<f64> {
    if models.is_empty() {
        return Err(Error::Validation("no models to evaluate".into()));
    }
    let mut sum = 0.0;
    for m in models {
        sum += evaluate(m, test)?;
    }
    Ok(sum / models.len() as f64)
}

/// Server state between rounds.
#[derive(Debug, Clone)]
pub struct GlobalState {
    /// Rounds completed so far.
    pub round: usize,
    pub params: ModelParams,
    pub soft: SoftTargetMatrix,
    pub rng: ChaCha8Rng,
}

/// Simulated deployment: one server, `shards.len()` devices.
pub struct Simulation<'a> {
    cfg: RunConfig,
    train: &'a DatasetStore,
    test: &'a DatasetStore,
    shards: Vec<DeviceShard>,
    state: GlobalState,
    initial_params: ModelParams,
    /// Persistent per-device models, used only in FD mode.
    device_models: Vec<ModelParams>,
    ledger: CommLedger,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> Simulation<'a> {
    /// `jobs` bounds the worker threads used for device updates; results do
    /// not depend on it.
    pub fn new(
        cfg: RunConfig,
        train: &'a DatasetStore,
        test: &'a DatasetStore,
        shards: Vec<DeviceShard>,
        jobs: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if shards.is_empty() {
            return Err(Error::Protocol("simulation needs at least one device".into()));
        }
        if train.dim() != test.dim() || train.num_classes() != test.num_classes() {
            return Err(Error::Dimension("train and test stores disagree on shape".into()));
        }
        for (i, s) in shards.iter().enumerate() {
            if s.device_id != i {
                return Err(Error::Protocol(format!("shard {i} carries device id {}", s.device_id)));
            }
        }
        let dims = cfg.model_dims(train.dim(), train.num_classes());
        let params = nn::init_params(&dims, cfg.init_seed())?;
        let soft = init_soft_targets(train.num_classes())?;
        let device_models = if cfg.mode == Mode::Fd {
            vec![params.clone(); shards.len()]
        } else {
            Vec::new()
        };
        let pool = if jobs > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(jobs)
                    .build()
                    .map_err(|e| Error::Protocol(format!("worker pool: {e}")))?,
            )
        } else {
            None
        };
        let rng = ChaCha8Rng::seed_from_u64(cfg.selection_seed());
        Ok(Self {
            state: GlobalState {
                round: 0,
                params: params.clone(),
                soft,
                rng,
            },
            initial_params: params,
            cfg,
            train,
            test,
            shards,
            device_models,
            ledger: CommLedger::default(),
            pool,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn state(&self) -> &GlobalState {
        &self.state
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn device_models(&self) -> &[ModelParams] {
        &self.device_models
    }

    pub fn num_devices(&self) -> usize {
        self.shards.len()
    }

    /// A device joining between rounds. It takes part in later selections
    /// and, in FD mode, starts from the initial model.
    pub fn add_device(&mut self, indices: Vec<usize>) -> Result<usize> {
        if indices.is_empty() || indices.iter().any(|&i| i >= self.train.len()) {
            return Err(Error::Validation("new device needs in-range sample indices".into()));
        }
        let id = self.shards.len();
        self.shards.push(DeviceShard::from_indices(id, indices, self.train));
        if self.cfg.mode == Mode::Fd {
            self.device_models.push(self.initial_params.clone());
        }
        Ok(id)
    }

    fn collect_updates(&self, selected: &[usize], round: usize) -> Result<Vec<RoundUpdate>> {
        let run = |&k: &usize| {
            let start = match self.cfg.mode {
                Mode::Fd => &self.device_models[k],
                _ => &self.state.params,
            };
            device_update(start, &self.state.soft, &self.shards[k], self.train, &self.cfg, round)
        };
        match &self.pool {
            Some(pool) => pool.install(|| selected.par_iter().map(run).collect()),
            None => selected.iter().map(run).collect(),
        }
    }

    /// Executes the next round and returns its metrics record.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        if self.state.round >= self.cfg.rounds {
            return Err(Error::Protocol(format!(
                "all {} rounds already completed",
                self.cfg.rounds
            )));
        }
        let round = self.state.round + 1;
        let mode = self.cfg.mode;
        let weights = round_weights(&self.cfg, round)?;
        let selected = select_devices(self.shards.len(), self.cfg.fraction, &mut self.state.rng);
        let updates = self.collect_updates(&selected, round)?;

        if mode.exchanges_model() {
            self.state.params = aggregate_deltas(&updates, &self.state.params)?;
        }
        if mode.exchanges_soft_targets() {
            let pairs: Vec<(&SoftTargetMatrix, usize)> =
                updates.iter().map(|u| (&u.soft, u.device_size)).collect();
            self.state.soft = aggregate_soft_targets(&pairs, self.cfg.soft_aggregation, &self.state.soft)?;
        }
        if mode == Mode::Fd {
            for u in &updates {
                let model = &mut self.device_models[u.device_id];
                *model = u.delta.apply_to(model)?;
            }
        }

        let classes = self.train.num_classes();
        let param_bytes = self.initial_params.byte_size();
        let (up_model, up_soft) = upload_components(mode, param_bytes, classes);
        let (down_model, down_soft) = download_components(mode, param_bytes, classes);
        let k = updates.len() as u64;
        let traffic = RoundTraffic {
            round,
            upload_model: k * up_model,
            upload_soft: k * up_soft,
            download_model: k * down_model,
            download_soft: k * down_soft,
        };
        debug_assert_eq!(traffic.upload(), updates.iter().map(|u| u.upload_bytes).sum::<u64>());
        self.ledger.record(traffic);

        let accuracy = match mode {
            Mode::Fd => evaluate_mean(&self.device_models, self.test)?,
            _ => evaluate(&self.state.params, self.test)?,
        };
        let mean_local_loss = updates.iter().map(|u| u.mean_loss).sum::<f64>() / updates.len() as f64;
        self.state.round = round;
        Ok(RoundMetrics {
            round,
            mode: mode.as_str().to_string(),
            rho: weights.rho(),
            global_accuracy: accuracy,
            mean_local_loss,
            upload_bytes: traffic.upload(),
            download_bytes: traffic.download(),
            cumulative_bytes: self.ledger.cumulative_bytes(),
        })
    }

    /// Runs every remaining round.
    pub fn run(&mut self) -> Result<Vec<RoundMetrics>> {
        let mut out = Vec::with_capacity(self.cfg.rounds - self.state.round);
        while self.state.round < self.cfg.rounds {
            out.push(self.run_round()?);
        }
        Ok(out)
    }
}

/// Loads data, builds the simulation and runs it to completion.
pub fn run_config(cfg: &RunConfig, jobs: usize) -> Result<Vec<RoundMetrics>> {
    let data = cfg.prepare()?;
    let mut sim = Simulation::new(cfg.clone(), &data.train, &data.test, data.shards, jobs)?;
    sim.run()
}
