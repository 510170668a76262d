//! Independent reference computations shared by the oracle tests and the
//! acceptance suite.

#![allow(clippy::needless_range_loop)]

use dfl_core::nn::{self, LossWeights, ModelDelta, ModelParams, Sample};
use dfl_core::protocol::{aggregate_deltas, RoundUpdate};
use dfl_core::soft_targets::{aggregate_soft_targets, SoftAggregation, SoftTargetMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{random_distribution, random_input, random_params};

pub struct GradientCheck {
    pub coordinates: usize,
    pub worst_relative_error: f64,
}

fn random_dims(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut dims = vec![rng.random_range(1..6)];
    for _ in 0..rng.random_range(0..3) {
        dims.push(rng.random_range(2..6));
    }
    dims.push(rng.random_range(2..6));
    dims
}

fn batch_loss(params: &ModelParams, batch: &[Sample<'_>], weights: LossWeights) -> f64 {
    let total: f64 = batch
        .iter()
        .map(|s| {
            let pred = nn::forward(params, s.input).unwrap();
            nn::mixed_loss(&pred, s.label, s.soft, weights).unwrap()
        })
        .sum();
    total / batch.len() as f64
}

/// Compares every analytic gradient coordinate against a central difference
/// with step `1e-6` over `triples` random (params, batch, rho) draws. The
/// relative error uses a denominator floor of `1e-4` so vanishing
/// coordinates are judged on absolute error.
pub fn gradient_check(seed: u64, triples: usize) -> GradientCheck {
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut coordinates = 0;
    for _ in 0..triples {
        let dims = random_dims(&mut rng);
        let classes = *dims.last().unwrap();
        let params = random_params(&dims, 0.8, &mut rng);
        let size = rng.random_range(1..5);
        let inputs: Vec<Vec<f64>> = (0..size).map(|_| random_input(dims[0], &mut rng)).collect();
        let labels: Vec<usize> = (0..size).map(|_| rng.random_range(0..classes)).collect();
        let softs: Vec<Vec<f64>> = (0..size).map(|_| random_distribution(classes, &mut rng)).collect();
        let batch: Vec<Sample<'_>> = (0..size)
            .map(|i| Sample {
                input: &inputs[i],
                label: labels[i],
                soft: &softs[i],
            })
            .collect();
        let weights = LossWeights::new(rng.random::<f64>()).unwrap();

        let grad = nn::backward(&params, &batch, weights).unwrap();
        for j in 0..params.len() {
            let mut plus = params.clone();
            plus.as_mut_slice()[j] += h;
            let mut minus = params.clone();
            minus.as_mut_slice()[j] -= h;
            let numeric = (batch_loss(&plus, &batch, weights) - batch_loss(&minus, &batch, weights)) / (2.0 * h);
            let analytic = grad.as_slice()[j];
            let scale = analytic.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max((analytic - numeric).abs() / scale);
            coordinates += 1;
        }
    }
    GradientCheck {
        coordinates,
        worst_relative_error: worst,
    }
}

fn bare_update(device_id: usize, delta: ModelDelta, size: usize) -> RoundUpdate {
    RoundUpdate {
        device_id,
        delta,
        soft: SoftTargetMatrix::uniform(2).unwrap(),
        device_size: size,
        upload_bytes: 0,
        download_bytes: 0,
        mean_loss: 0.0,
    }
}

/// Largest deviation of delta aggregation from a scalar weighted-sum loop.
pub fn delta_aggregation_error(seed: u64, cases: usize) -> f64 {
    let dims = [5, 4, 3];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let current = random_params(&dims, 1.0, &mut rng);
        let k = rng.random_range(1..=10);
        let updates: Vec<RoundUpdate> = (0..k)
            .map(|id| {
                let delta = ModelDelta::from_params(random_params(&dims, 0.5, &mut rng));
                bare_update(id * 3, delta, rng.random_range(1..700))
            })
            .collect();
        let got = aggregate_deltas(&updates, &current).unwrap();

        let total: f64 = updates.iter().map(|u| u.device_size as f64).sum();
        for j in 0..current.len() {
            let mut acc = 0.0;
            for u in &updates {
                acc += u.device_size as f64 * u.delta.as_slice()[j];
            }
            let expect = current.as_slice()[j] + acc / total;
            worst = worst.max((got.as_slice()[j] - expect).abs());
        }
    }
    worst
}

/// Largest deviation of size-weighted soft-target aggregation from a scalar
/// weighted-sum loop over ten random device matrices per case.
pub fn soft_aggregation_error(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let classes = rng.random_range(2..8);
        let mats: Vec<SoftTargetMatrix> = (0..10)
            .map(|_| {
                let rows = (0..classes).map(|_| random_distribution(classes, &mut rng)).collect();
                let counts = (0..classes).map(|_| rng.random_range(0..20)).collect();
                SoftTargetMatrix::from_rows(rows, counts).unwrap()
            })
            .collect();
        let sizes: Vec<usize> = (0..10).map(|_| rng.random_range(1..900)).collect();
        let pairs: Vec<(&SoftTargetMatrix, usize)> = mats.iter().zip(sizes.iter().copied()).collect();
        let previous = SoftTargetMatrix::uniform(classes).unwrap();
        let got = aggregate_soft_targets(&pairs, SoftAggregation::Literal, &previous).unwrap();

        let total: f64 = sizes.iter().map(|&s| s as f64).sum();
        for c in 0..classes {
            let mut row = vec![0.0; classes];
            for (m, &s) in mats.iter().zip(&sizes) {
                for j in 0..classes {
                    row[j] += s as f64 * m.row(c)[j] / total;
                }
            }
            for j in 0..classes {
                worst = worst.max((got.row(c)[j] - row[j]).abs());
            }
        }
    }
    worst
}
