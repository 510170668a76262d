mod common;

use std::collections::HashSet;

use common::mnist_dir;
use dfl_core::data::*;
use dfl_core::protocol::{run_config, DatasetSpec, Mode, PartitionConfig, RunConfig};

fn non_iid(num_devices: usize, size: usize, seed: u64) -> PartitionSpec {
    PartitionSpec {
        scheme: PartitionScheme::NonIid80,
        num_devices,
        samples_per_device: size,
        seed,
        allow_overlap: false,
    }
}

fn check_non_iid(shards: &[DeviceShard], classes: usize, size: usize) {
    let mut seen = HashSet::new();
    for s in shards {
        assert_eq!(s.size(), size);
        assert_eq!(s.per_label_counts.iter().sum::<usize>(), size);
        assert!(s.indices.iter().all(|&i| seen.insert(i)), "index reused across shards");
        let dominant = s.device_id % classes;
        assert_eq!(s.per_label_counts[dominant], (4 * size + 2) / 5);
        let minority: Vec<usize> = (0..classes).filter(|&l| l != dominant).map(|l| s.per_label_counts[l]).collect();
        let (lo, hi) = (minority.iter().min().unwrap(), minority.iter().max().unwrap());
        assert!(hi - lo <= 1, "{minority:?}");
    }
}

#[test]
fn synthetic_non_iid_shards_are_disjoint_and_exact() {
    let store = synth_gaussian(10, 4, 700, 2.0, 1).unwrap();
    let shards = partition(&store, &non_iid(50, 120, 3)).unwrap();
    check_non_iid(&shards, 10, 120);
    assert_eq!(shards, partition(&store, &non_iid(50, 120, 3)).unwrap());
    assert_ne!(shards, partition(&store, &non_iid(50, 120, 4)).unwrap());
}

#[test]
fn six_hundred_sample_split_is_480_plus_13_or_14() {
    let store = synth_gaussian(10, 2, 1000, 1.0, 2).unwrap();
    let shards = partition(&store, &non_iid(10, 600, 0)).unwrap();
    for s in &shards {
        let dominant = s.device_id % 10;
        assert_eq!(s.per_label_counts[dominant], 480);
        for l in (0..10).filter(|&l| l != dominant) {
            assert!(matches!(s.per_label_counts[l], 13 | 14));
        }
    }
}

#[test]
fn iid_shards_partition_without_replacement() {
    let store = synth_gaussian(5, 3, 100, 1.0, 0).unwrap();
    let spec = PartitionSpec { scheme: PartitionScheme::Iid, ..non_iid(10, 50, 7) };
    let shards = partition(&store, &spec).unwrap();
    let all: HashSet<usize> = shards.iter().flat_map(|s| s.indices.iter().copied()).collect();
    assert_eq!(all.len(), 500);
    let too_many = PartitionSpec { num_devices: 11, ..spec };
    assert!(partition(&store, &too_many).is_err());
}

#[test]
fn unseparated_classes_stay_at_chance() {
    let cfg = centralised(0.0, 10, 32, vec![]);
    let acc = run_config(&cfg, 1).unwrap().last().unwrap().global_accuracy;
    assert!((acc - 0.1).abs() <= 0.05, "accuracy {acc}");
}

#[test]
fn well_separated_classes_are_learned() {
    let cfg = centralised(5.0, 10, 16, vec![32]);
    let acc = run_config(&cfg, 1).unwrap().last().unwrap().global_accuracy;
    assert!(acc > 0.95, "accuracy {acc}");
}

/// One device holding the whole training store, so federated rounds reduce
/// to ordinary mini-batch training.
fn centralised(separation: f64, classes: usize, dim: usize, hidden: Vec<usize>) -> RunConfig {
    RunConfig {
        mode: Mode::FedAvg,
        num_devices: 1,
        fraction: 1.0,
        rounds: 10,
        learning_rate: 0.5,
        hidden,
        dataset: DatasetSpec::Synthetic {
            num_classes: classes,
            dim,
            train_per_class: 200,
            test_per_class: 200,
            separation,
            seed: 5,
        },
        partition: PartitionConfig {
            scheme: PartitionScheme::Iid,
            samples_per_device: 200 * classes,
            allow_overlap: false,
        },
        ..Default::default()
    }
}

fn mnist_train() -> Option<DatasetStore> {
    let Some(dir) = mnist_dir() else {
        eprintln!("MNIST files not found; set MNIST_DIR to run the MNIST data checks");
        return None;
    };
    Some(load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte")).unwrap())
}

#[test]
fn mnist_training_files_decode() {
    let Some(store) = mnist_train() else { return };
    assert_eq!(store.len(), 60000);
    assert_eq!(store.num_classes(), 10);
    assert_eq!(store.dim(), 784);
}

#[test]
fn mnist_iid_shards_are_roughly_balanced() {
    let Some(store) = mnist_train() else { return };
    let spec = PartitionSpec { scheme: PartitionScheme::Iid, ..non_iid(100, 600, 1) };
    let shards = partition(&store, &spec).unwrap();
    assert_eq!(shards.len(), 100);
    let totals = store.label_counts();
    for label in 0..10 {
        let mean = shards.iter().map(|s| s.per_label_counts[label] as f64).sum::<f64>() / 100.0;
        assert!((45.0..=75.0).contains(&mean), "label {label} mean {mean}");
        let p = totals[label] as f64 / store.len() as f64;
        let (expect, sd) = (600.0 * p, (600.0 * p * (1.0 - p)).sqrt());
        for s in &shards {
            assert_eq!(s.size(), 600);
            let n = s.per_label_counts[label] as f64;
            assert!((n - expect).abs() <= 4.0 * sd, "label {label}: {n} vs {expect}");
        }
    }
}

#[test]
fn mnist_non_iid_needs_overlap_for_full_scale() {
    let Some(store) = mnist_train() else { return };
    match partition(&store, &non_iid(100, 600, 1)) {
        Err(dfl_core::Error::Infeasible { .. }) => {}
        other => panic!("expected an infeasibility error, got {other:?}"),
    }
    let spec = PartitionSpec { allow_overlap: true, ..non_iid(100, 600, 1) };
    let shards = partition(&store, &spec).unwrap();
    for s in &shards {
        assert_eq!(s.per_label_counts[s.device_id % 10], 480);
        assert_eq!(s.indices.iter().collect::<HashSet<_>>().len(), 600);
    }
}
