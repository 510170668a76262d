//! End-to-end acceptance checks. Each criterion prints one `[PASS]` or
//! `[FAIL]` line; the process exits non-zero if any criterion fails.
//!
//! Positional arguments filter criteria by substring, e.g.
//! `cargo test --test acceptance -- mnist`.

mod common;

use std::time::{Duration, Instant};

use dfl_core::convergence::{envelope_check, run_virtual_sequence, ConvexTaskSettings, ConvexTaskSpec, Participation};
use dfl_core::data::PartitionScheme;
use dfl_core::protocol::*;
use dfl_core::soft_targets::SoftTargetMatrix;

const SEEDS: [u64; 3] = [0, 1, 2];

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

/// Synthetic non-IID task shared by the qualitative comparisons: ten
/// Gaussian classes in 32 dimensions, 50 devices of 600 samples with 80% of
/// each shard on one label, 60 rounds of 5 local epochs.
fn synthetic(mode: Mode, schedule: Schedule, seed: u64) -> RunConfig {
    RunConfig {
        mode,
        schedule,
        seed,
        num_devices: 50,
        rounds: 60,
        local_epochs: 5,
        learning_rate: 1.0,
        batch_size: 50,
        hidden: vec![64],
        dataset: DatasetSpec::Synthetic {
            num_classes: 10,
            dim: 32,
            train_per_class: 3600,
            test_per_class: 300,
            separation: 3.0,
            seed: 7,
        },
        partition: PartitionConfig {
            scheme: PartitionScheme::NonIid80,
            samples_per_device: 600,
            allow_overlap: false,
        },
        ..Default::default()
    }
}

const WITH_THRESHOLD: Schedule = Schedule::DynamicWithThreshold { threshold: 0.6 };

struct SeedRuns {
    dfl: Vec<RoundMetrics>,
    fedavg: Vec<RoundMetrics>,
    no_floor: Vec<RoundMetrics>,
    fixed: Vec<RoundMetrics>,
}

struct SyntheticRuns {
    seeds: Vec<SeedRuns>,
    elapsed: Duration,
}

fn run(cfg: &RunConfig, jobs: usize) -> Vec<RoundMetrics> {
    run_config(cfg, jobs).unwrap_or_else(|e| panic!("run failed: {e}"))
}

fn synthetic_runs() -> &'static SyntheticRuns {
    static RUNS: std::sync::OnceLock<SyntheticRuns> = std::sync::OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let seeds = SEEDS
            .iter()
            .map(|&s| SeedRuns {
                dfl: run(&synthetic(Mode::Dfl, WITH_THRESHOLD, s), 1),
                fedavg: run(&synthetic(Mode::FedAvg, WITH_THRESHOLD, s), 1),
                no_floor: run(&synthetic(Mode::Dfl, Schedule::DynamicWithThreshold { threshold: 0.0 }, s), 1),
                fixed: run(&synthetic(Mode::Dfl, Schedule::Fixed { rho: 0.6 }, s), 1),
            })
            .collect();
        SyntheticRuns {
            seeds,
            elapsed: start.elapsed(),
        }
    })
}

fn final_accuracy(m: &[RoundMetrics]) -> f64 {
    m.last().map_or(0.0, |r| r.global_accuracy)
}

fn early_accuracy(m: &[RoundMetrics]) -> f64 {
    m[..10].iter().map(|r| r.global_accuracy).sum::<f64>() / 10.0
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pct(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{:.2}", 100.0 * x)).collect();
    parts.join("/")
}

fn fedavg_equivalence() -> Outcome {
    let base = synthetic(Mode::Dfl, Schedule::Fixed { rho: 1.0 }, 0);
    let dfl = RunConfig {
        num_devices: 20,
        rounds: 20,
        partition: PartitionConfig {
            samples_per_device: 200,
            ..base.partition.clone()
        },
        ..base
    };
    let fedavg = RunConfig { mode: Mode::FedAvg, ..dfl.clone() };
    let a = dfl.prepare().unwrap();
    let b = fedavg.prepare().unwrap();
    let mut x = Simulation::new(dfl, &a.train, &a.test, a.shards, 1).unwrap();
    let mut y = Simulation::new(fedavg, &b.train, &b.test, b.shards, 1).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        x.run_round().unwrap();
        y.run_round().unwrap();
        worst = worst.max(x.state().params.max_abs_diff(&y.state().params).unwrap());
    }
    Outcome::new(worst <= 1e-12, format!("max parameter difference over 20 rounds {worst:.1e}"))
}

fn gradient_oracle() -> Outcome {
    let check = common::oracles::gradient_check(2024, 200);
    Outcome::new(
        check.worst_relative_error <= 1e-4,
        format!(
            "{} coordinates over 200 triples, worst relative error {:.2e}",
            check.coordinates, check.worst_relative_error
        ),
    )
}

fn aggregation_oracles() -> Outcome {
    let delta = common::oracles::delta_aggregation_error(1, 50);
    let soft = common::oracles::soft_aggregation_error(5, 50);
    Outcome::new(
        delta <= 1e-12 && soft <= 1e-12,
        format!("50 cases each: delta error {delta:.1e}, soft-target error {soft:.1e}"),
    )
}

fn payload_sizes() -> Outcome {
    let ten = upload_components(Mode::Fd, 0, 10).1 - 10 * 8;
    let twenty = upload_components(Mode::Fd, 0, 20).1 - 20 * 8;
    let matrix = SoftTargetMatrix::uniform(20).unwrap().payload_bytes();
    Outcome::new(
        ten == 800 && twenty == 3200 && matrix == 3200,
        format!("C=10: {ten} bytes, C=20: {twenty} bytes"),
    )
}

fn dfl_vs_fedavg() -> Outcome {
    let runs = synthetic_runs();
    let dfl: Vec<f64> = runs.seeds.iter().map(|s| final_accuracy(&s.dfl)).collect();
    let fedavg: Vec<f64> = runs.seeds.iter().map(|s| final_accuracy(&s.fedavg)).collect();
    let wins = dfl.iter().zip(&fedavg).filter(|(a, b)| a >= b).count();
    let passed = mean(&dfl) >= mean(&fedavg) - 0.002 && wins >= 2 && runs.elapsed < Duration::from_secs(600);
    Outcome::new(
        passed,
        format!(
            "DFL {} (mean {:.2}) vs FedAvg {} (mean {:.2}), DFL ahead on {wins}/3 seeds, {:.0}s",
            pct(&dfl),
            100.0 * mean(&dfl),
            pct(&fedavg),
            100.0 * mean(&fedavg),
            runs.elapsed.as_secs_f64()
        ),
    )
}

fn threshold_sweep() -> Outcome {
    let runs = synthetic_runs();
    let floor: Vec<f64> = runs.seeds.iter().map(|s| final_accuracy(&s.dfl)).collect();
    let none: Vec<f64> = runs.seeds.iter().map(|s| final_accuracy(&s.no_floor)).collect();
    let gap = mean(&floor) - mean(&none);
    Outcome::new(
        gap >= 0.02,
        format!(
            "threshold 0.6 {} vs threshold 0 {}: gap {:.2} points",
            pct(&floor),
            pct(&none),
            100.0 * gap
        ),
    )
}

fn dynamic_vs_fixed() -> Outcome {
    let runs = synthetic_runs();
    let dynamic: Vec<f64> = runs.seeds.iter().map(|s| early_accuracy(&s.dfl)).collect();
    let fixed: Vec<f64> = runs.seeds.iter().map(|s| early_accuracy(&s.fixed)).collect();
    let wins = dynamic.iter().zip(&fixed).filter(|(a, b)| a > b).count();
    Outcome::new(
        mean(&dynamic) >= mean(&fixed) && wins >= 2,
        format!(
            "rounds 1-10 mean accuracy: dynamic {} vs fixed 0.6 {}, dynamic ahead on {wins}/3 seeds",
            pct(&dynamic),
            pct(&fixed)
        ),
    )
}

fn convergence_rate() -> Outcome {
    let start = Instant::now();
    let task = ConvexTaskSpec::synthetic(&ConvexTaskSettings {
        replicates: 16,
        ..Default::default()
    })
    .unwrap();
    let mut passed = true;
    let mut parts = Vec::new();
    for participation in [Participation::Full, Participation::Partial(5)] {
        let diag = run_virtual_sequence(&task, 1000, participation).unwrap();
        let env = envelope_check(&diag);
        passed &= diag.tail_slope <= -0.8 && env.passed;
        parts.push(format!(
            "{participation:?}: slope {:.3}, envelope ratio {:.2}",
            diag.tail_slope, env.max_ratio
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(passed && secs < 120.0, format!("{}; {secs:.0}s", parts.join("; ")))
}

fn determinism() -> Outcome {
    let runs = synthetic_runs();
    let cfg = synthetic(Mode::Dfl, WITH_THRESHOLD, SEEDS[0]);
    let single = metrics_csv_bytes(&runs.seeds[0].dfl).unwrap();
    let parallel = metrics_csv_bytes(&run(&cfg, 4)).unwrap();
    Outcome::new(
        single == parallel,
        format!("DFL synthetic run, 1 vs 4 workers: {} CSV bytes each", single.len()),
    )
}

fn mnist_smoke() -> Outcome {
    let Some(dir) = common::mnist_dir() else {
        return Outcome::new(
            false,
            "MNIST IDX files not found under data/mnist; set MNIST_DIR or fetch them (see README)",
        );
    };
    let start = Instant::now();
    let cfg = |mode| RunConfig {
        mode,
        rounds: 30,
        num_devices: 100,
        fraction: 0.1,
        hidden: vec![64],
        dataset: DatasetSpec::Mnist { dir: dir.clone() },
        partition: PartitionConfig {
            scheme: PartitionScheme::NonIid80,
            samples_per_device: 600,
            allow_overlap: true,
        },
        ..Default::default()
    };
    let dfl = final_accuracy(&run(&cfg(Mode::Dfl), 4));
    let fedavg = final_accuracy(&run(&cfg(Mode::FedAvg), 4));
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        dfl >= 0.85 && dfl >= fedavg - 0.005 && secs < 1200.0,
        format!(
            "784-64-10, 100 devices x 600: DFL {:.2}% vs FedAvg {:.2}%, {secs:.0}s",
            100.0 * dfl,
            100.0 * fedavg
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("fedavg equivalence", fedavg_equivalence),
        ("gradient oracle", gradient_oracle),
        ("aggregation oracles", aggregation_oracles),
        ("payload exactness", payload_sizes),
        ("dfl vs fedavg on non-iid", dfl_vs_fedavg),
        ("threshold sweep shape", threshold_sweep),
        ("dynamic vs fixed early rounds", dynamic_vs_fixed),
        ("convergence rate", convergence_rate),
        ("determinism across workers", determinism),
        ("mnist smoke", mnist_smoke),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let outcome = check();
        let tag = if outcome.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {name}: {}", outcome.detail);
        failed += usize::from(!outcome.passed);
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
