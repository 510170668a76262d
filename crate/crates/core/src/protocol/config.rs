use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetStore, DeviceShard, PartitionScheme, PartitionSpec};
use crate::error::{Error, Result};
use crate::soft_targets::SoftAggregation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Model deltas and soft targets are both exchanged.
    Dfl,
    /// Model deltas only; plain cross-entropy training.
    #[serde(rename = "fedavg")]
    FedAvg,
    /// Soft targets only; every device keeps its own model across rounds.
    Fd,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Dfl => "dfl",
            Mode::FedAvg => "fedavg",
            Mode::Fd => "fd",
        }
    }

    pub fn exchanges_model(self) -> bool {
        matches!(self, Mode::Dfl | Mode::FedAvg)
    }

    pub fn exchanges_soft_targets(self) -> bool {
        matches!(self, Mode::Dfl | Mode::Fd)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Hard-label weight `rho` as a function of the round index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    /// `max(1 - r/R, threshold)`
    DynamicWithThreshold { threshold: f64 },
    /// `1 - r/R`
    DynamicNoThreshold,
    Fixed { rho: f64 },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::DynamicWithThreshold { threshold: 0.6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Seeded Gaussian classes; see [`data::synth_gaussian_split`].
    Synthetic {
        num_classes: usize,
        dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Directory holding the four standard MNIST IDX files.
    Mnist { dir: PathBuf },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            num_classes: 10,
            dim: 32,
            train_per_class: 1000,
            test_per_class: 200,
            separation: 3.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Returns `(train, test)` stores.
    pub fn load(&self) -> Result<(DatasetStore, DatasetStore)> {
        match self {
            DatasetSpec::Synthetic {
                num_classes,
                dim,
                train_per_class,
                test_per_class,
                separation,
                seed,
            } => data::synth_gaussian_split(*num_classes, *dim, *train_per_class, *test_per_class, *separation, *seed),
            DatasetSpec::Mnist { dir } => {
                let train = data::load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?;
                let test = data::load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
                Ok((train, test))
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            DatasetSpec::Synthetic {
                num_classes,
                dim,
                separation,
                ..
            } => format!("synthetic-c{num_classes}-d{dim}-s{separation}"),
            DatasetSpec::Mnist { .. } => "mnist".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub scheme: PartitionScheme,
    pub samples_per_device: usize,
    #[serde(default)]
    pub allow_overlap: bool,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            scheme: PartitionScheme::NonIid80,
            samples_per_device: 600,
            allow_overlap: false,
        }
    }
}

/// One complete simulation description. Defaults follow the reference
/// experiment settings: batch 50, learning rate 0.01, 5 local epochs,
/// 10% participation and threshold 0.6.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub schedule: Schedule,
    pub num_devices: usize,
    pub fraction: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Hidden layer widths; input and output widths come from the dataset.
    pub hidden: Vec<usize>,
    pub soft_aggregation: SoftAggregation,
    pub dataset: DatasetSpec,
    pub partition: PartitionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Dfl,
            schedule: Schedule::default(),
            num_devices: 100,
            fraction: 0.1,
            rounds: 100,
            local_epochs: 5,
            learning_rate: 0.01,
            batch_size: 50,
            seed: 0,
            hidden: vec![64],
            soft_aggregation: SoftAggregation::PerLabel,
            dataset: DatasetSpec::default(),
            partition: PartitionConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(msg));
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return fail(format!("fraction must lie in (0, 1], got {}", self.fraction));
        }
        if self.rounds == 0 {
            return fail("rounds must be at least 1".into());
        }
        if self.local_epochs == 0 {
            return fail("local_epochs must be at least 1".into());
        }
        if self.num_devices == 0 {
            return fail("num_devices must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.hidden.contains(&0) {
            return fail("hidden widths must be positive".into());
        }
        match self.schedule {
            Schedule::DynamicWithThreshold { threshold } if !(0.0..=1.0).contains(&threshold) => {
                return fail(format!("threshold must lie in [0, 1], got {threshold}"));
            }
            Schedule::Fixed { rho } if !(0.0..=1.0).contains(&rho) => {
                return fail(format!("fixed rho must lie in [0, 1], got {rho}"));
            }
            _ => {}
        }
        if self.partition.samples_per_device == 0 {
            return fail("samples_per_device must be at least 1".into());
        }
        Ok(())
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            scheme: self.partition.scheme,
            num_devices: self.num_devices,
            samples_per_device: self.partition.samples_per_device,
            seed: mix_seed(self.seed, 0x5041_5254, 0),
            allow_overlap: self.partition.allow_overlap,
        }
    }

    pub fn init_seed(&self) -> u64 {
        mix_seed(self.seed, 0x494e_4954, 0)
    }

    pub fn selection_seed(&self) -> u64 {
        mix_seed(self.seed, 0x53_454c, 0)
    }

    pub fn model_dims(&self, input_dim: usize, num_classes: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(&self.hidden);
        dims.push(num_classes);
        dims
    }

    /// Loads the dataset and partitions the training store.
    pub fn prepare(&self) -> Result<PreparedData> {
        self.validate()?;
        let (train, test) = self.dataset.load()?;
        let shards = data::partition(&train, &self.partition_spec())?;
        Ok(PreparedData { train, test, shards })
    }
}

pub struct PreparedData {
    pub train: DatasetStore,
    pub test: DatasetStore,
    pub shards: Vec<DeviceShard>,
}

/// SplitMix64 finaliser over `(seed, a, b)`; used for per-device, per-round streams.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(splitmix(splitmix(seed) ^ a) ^ b.rotate_left(32))
}

/// Seed for device `device_id`'s local shuffling in round `round`.
pub fn device_seed(seed: u64, device_id: usize, round: usize) -> u64 {
    mix_seed(seed, device_id as u64, round as u64)
}
