#![allow(dead_code)]

pub mod oracles;

use dfl_core::data::PartitionScheme;
use dfl_core::nn::ModelParams;
use dfl_core::protocol::{DatasetSpec, PartitionConfig, RunConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_params(dims: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> ModelParams {
    let mut p = ModelParams::zeros(dims).unwrap();
    for v in p.as_mut_slice() {
        *v = rng.random_range(-scale..scale);
    }
    p
}

pub fn random_distribution(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

pub fn random_input(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.random::<f64>()).collect()
}

/// A small synthetic federation that trains in well under a second.
pub fn tiny_config(num_devices: usize, rounds: usize) -> RunConfig {
    RunConfig {
        num_devices,
        fraction: 0.2,
        rounds,
        local_epochs: 2,
        learning_rate: 0.2,
        batch_size: 10,
        hidden: vec![8],
        dataset: DatasetSpec::Synthetic {
            num_classes: 10,
            dim: 6,
            train_per_class: 40,
            test_per_class: 20,
            separation: 3.0,
            seed: 3,
        },
        partition: PartitionConfig {
            scheme: PartitionScheme::NonIid80,
            samples_per_device: 20,
            allow_overlap: false,
        },
        ..Default::default()
    }
}

/// Path to the MNIST IDX directory, if the four files are present.
pub fn mnist_dir() -> Option<std::path::PathBuf> {
    let dir = std::env::var_os("MNIST_DIR")
        .map(Into::into)
        .unwrap_or_else(|| std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    let files = [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ];
    files.iter().all(|f| dir.join(f).is_file()).then_some(dir)
}
