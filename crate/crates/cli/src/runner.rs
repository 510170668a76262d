//! Executes a manifest: one run directory per (variant, seed), cached by a
//! hash of the full run configuration, then a summary over seeds.

use std::path::{Path, PathBuf};

use dfl_core::protocol::{metrics_csv_bytes, read_metrics_csv, run_config, write_metrics_jsonl, RoundMetrics, RunConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::fsutil::write_atomic;
use crate::manifest::ExperimentManifest;
use crate::summary::{mean_and_stddev, Summary, SummaryRow, SUMMARY_SCHEMA};

/// Contents of `run.json`, written last so its presence marks a complete run.
#[derive(Debug, Serialize, Deserialize)]
struct RunRecord {
    label: String,
    config: RunConfig,
}

/// First 16 hex digits of the SHA-256 of the configuration's JSON form.
pub fn config_hash(cfg: &RunConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("run configuration serialises");
    hex::encode(&Sha256::digest(&json)[..8])
}

struct Job<'a> {
    label: &'a str,
    config: RunConfig,
}

struct Finished {
    dir: String,
    metrics: Vec<RoundMetrics>,
    cached: bool,
}

/// Reuses a previous run when its record matches `cfg` and its metrics
/// cover every round.
fn load_cached(dir: &Path, cfg: &RunConfig) -> Option<Vec<RoundMetrics>> {
    let record: RunRecord = serde_json::from_slice(&std::fs::read(dir.join("run.json")).ok()?).ok()?;
    if record.config != *cfg {
        return None;
    }
    let metrics = read_metrics_csv(std::fs::File::open(dir.join("metrics.csv")).ok()?).ok()?;
    (metrics.len() == cfg.rounds).then_some(metrics)
}

fn execute(job: &Job<'_>, out: &Path, workers: usize) -> Result<Finished> {
    let hash = config_hash(&job.config);
    let rel = format!("runs/{hash}");
    let dir = out.join(&rel);
    if let Some(metrics) = load_cached(&dir, &job.config) {
        return Ok(Finished {
            dir: rel,
            metrics,
            cached: true,
        });
    }
    let metrics = run_config(&job.config, workers)
        .map_err(|e| CliError::runtime(format!("run `{}` (seed {}) failed: {e}", job.label, job.config.seed)))?;
    let csv = metrics_csv_bytes(&metrics).map_err(CliError::runtime)?;
    let mut jsonl = Vec::new();
    write_metrics_jsonl(&metrics, &mut jsonl).map_err(CliError::runtime)?;
    let record = RunRecord {
        label: job.label.to_string(),
        config: job.config.clone(),
    };
    let mut record_bytes = serde_json::to_vec_pretty(&record).map_err(CliError::runtime)?;
    record_bytes.push(b'\n');
    write_atomic(&dir.join("metrics.csv"), &csv)?;
    write_atomic(&dir.join("metrics.jsonl"), &jsonl)?;
    write_atomic(&dir.join("run.json"), &record_bytes)?;
    Ok(Finished {
        dir: rel,
        metrics,
        cached: false,
    })
}

pub struct Outcome {
    pub summary: Summary,
    pub summary_path: PathBuf,
}

/// Runs every (variant, seed) pair on up to `jobs` workers and writes
/// `summary.json` under `out`.
pub fn run_experiment(manifest: &ExperimentManifest, out: &Path, jobs: usize) -> Result<Outcome> {
    let jobs = jobs.max(1);
    let mut queue = Vec::new();
    for v in &manifest.variants {
        for r in 0..manifest.repeat {
            let mut config = v.config.clone();
            config.seed = v.config.seed.wrapping_add(r as u64);
            queue.push(Job { label: &v.label, config });
        }
    }
    // A lone run spreads its device updates over the workers instead.
    let per_run = if queue.len() == 1 { jobs } else { 1 };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::runtime(format!("worker pool: {e}")))?;
    let finished: Vec<Finished> = pool.install(|| {
        queue
            .par_iter()
            .map(|job| {
                let done = execute(job, out, per_run)?;
                let acc = done.metrics.last().map_or(f64::NAN, |m| m.global_accuracy);
                let note = if done.cached { " (cached)" } else { "" };
                eprintln!("{} seed {}: final accuracy {:.4}{note}", job.label, job.config.seed, acc);
                Ok(done)
            })
            .collect::<Result<_>>()
    })?;

    let mut rows = Vec::with_capacity(manifest.variants.len());
    for (v, runs) in manifest.variants.iter().zip(finished.chunks(manifest.repeat)) {
        let finals: Vec<f64> = runs
            .iter()
            .map(|f| f.metrics.last().map_or(f64::NAN, |m| m.global_accuracy))
            .collect();
        let (mean, stddev) = mean_and_stddev(&finals);
        let bytes: Vec<u64> = runs
            .iter()
            .map(|f| f.metrics.last().map_or(0, |m| m.cumulative_bytes))
            .collect();
        rows.push(SummaryRow {
            label: v.label.clone(),
            mode: v.config.mode.to_string(),
            sweep: v
                .sweep
                .iter()
                .map(|(k, val)| (k.clone(), serde_json::to_value(val).expect("sweep values are plain data")))
                .collect(),
            seeds: (0..manifest.repeat).map(|r| v.config.seed.wrapping_add(r as u64)).collect(),
            final_accuracies: finals,
            mean_accuracy: mean,
            stddev_accuracy: stddev,
            total_bytes: bytes.iter().sum::<u64>() / bytes.len() as u64,
            run_dirs: runs.iter().map(|f| f.dir.clone()).collect(),
        });
    }
    let summary = Summary {
        schema: SUMMARY_SCHEMA.into(),
        name: manifest.name.clone(),
        rows,
    };
    let summary_path = out.join("summary.json");
    write_atomic(&summary_path, &summary.to_json())?;
    Ok(Outcome { summary, summary_path })
}
