//! `dfl`: run federated experiments from manifests, compare their
//! summaries and run the convergence harness.
//!
//! Exit codes: 0 success, 1 runtime failure (or a failed convergence
//! check), 2 usage or configuration error.

mod converge;
mod error;
mod fsutil;
mod manifest;
mod runner;
mod summary;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::converge::ConvergeManifest;
use crate::error::{CliError, Result};
use crate::manifest::ExperimentManifest;
use crate::summary::Summary;

#[derive(Parser)]
#[command(name = "dfl", version, about = "Distillation-based federated learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configuration in a manifest and write summary.json
    Run {
        manifest: PathBuf,
        /// Output directory; overrides the manifest's output_dir
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (default: available cores)
        #[arg(long)]
        jobs: Option<usize>,
        /// Upper bound on worker threads, whatever --jobs says
        #[arg(long, env = "DFL_MAX_JOBS", hide_env_values = true)]
        max_jobs: Option<usize>,
    },
    /// Print a side-by-side table of two or more summary.json files
    Compare {
        #[arg(num_args = 2.., required = true)]
        summaries: Vec<PathBuf>,
    },
    /// Run the convex convergence harness and write convergence.json
    Converge {
        manifest: PathBuf,
        /// Report path; overrides the manifest's output
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run {
            manifest,
            out,
            jobs,
            max_jobs,
        } => {
            let m = ExperimentManifest::load(&manifest)?;
            let requested = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            if requested == 0 || max_jobs == Some(0) {
                return Err(CliError::usage("worker counts must be at least 1"));
            }
            let workers = requested.min(max_jobs.unwrap_or(usize::MAX));
            let out = out.unwrap_or_else(|| m.output_dir.clone());
            let outcome = runner::run_experiment(&m, &out, workers)?;
            for row in &outcome.summary.rows {
                println!(
                    "{}: {:.2} +/- {:.2} over {} seed(s), {} bytes",
                    row.label,
                    100.0 * row.mean_accuracy,
                    100.0 * row.stddev_accuracy,
                    row.seeds.len(),
                    row.total_bytes
                );
            }
            println!("wrote {}", outcome.summary_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare { summaries } => {
            let mut named = Vec::new();
            for path in &summaries {
                let s = Summary::load(path)?;
                let taken = named.iter().any(|(n, _): &(String, Summary)| *n == s.name);
                let name = if taken { path.display().to_string() } else { s.name.clone() };
                named.push((name, s));
            }
            print!("{}", summary::render_comparison(&named));
            Ok(ExitCode::SUCCESS)
        }
        Command::Converge { manifest, out } => {
            let m = ConvergeManifest::load(&manifest)?;
            let base = manifest.parent().unwrap_or_else(|| std::path::Path::new("."));
            let out = out.unwrap_or_else(|| base.join(m.output.clone().unwrap_or_else(|| "convergence.json".into())));
            let (_, passed) = converge::run_convergence(&m, &out)?;
            println!("wrote {}", out.display());
            Ok(if passed {
                println!("convergence check passed");
                ExitCode::SUCCESS
            } else {
                println!("convergence check failed");
                ExitCode::from(1)
            })
        }
    }
}
