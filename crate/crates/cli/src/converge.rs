//! The `converge` command: runs the convex harness for each requested
//! participation scheme and writes one report per scheme.

use std::path::{Path, PathBuf};

use dfl_core::convergence::{run_virtual_sequence, ConvergenceReport, ConvexTaskSettings, ConvexTaskSpec, Participation};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::fsutil;

pub const CONVERGENCE_SCHEMA: &str = "dfl-convergence/1";

/// ```toml
/// rounds = 1000
/// participation = [{ kind = "full" }, { kind = "partial", devices = 5 }]
///
/// [task]
/// mu = 0.2
/// replicates = 16
/// ```
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergeManifest {
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_participation")]
    pub participation: Vec<Participation>,
    #[serde(default)]
    pub task: ConvexTaskSettings,
    /// Report path, relative to the manifest.
    pub output: Option<PathBuf>,
}

fn default_rounds() -> usize {
    1000
}

fn default_participation() -> Vec<Participation> {
    vec![Participation::Full, Participation::Partial(5)]
}

#[derive(Debug, Serialize)]
struct ConvergenceFile<'a> {
    schema: &'static str,
    rounds: usize,
    task: &'a ConvexTaskSettings,
    reports: &'a [ConvergenceReport],
}

impl ConvergeManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fsutil::read_to_string(path)?;
        let m: Self =
            toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: invalid manifest: {e}", path.display())))?;
        if m.rounds == 0 || m.participation.is_empty() {
            return Err(CliError::usage("rounds and participation must be nonempty"));
        }
        if m.participation.contains(&Participation::Partial(0)) {
            return Err(CliError::usage("partial participation needs at least one device"));
        }
        Ok(m)
    }
}

/// Returns the reports and whether every scheme passed.
pub fn run_convergence(manifest: &ConvergeManifest, out: &Path) -> Result<(Vec<ConvergenceReport>, bool)> {
    let task = ConvexTaskSpec::synthetic(&manifest.task).map_err(CliError::usage)?;
    let mut reports = Vec::new();
    for &p in &manifest.participation {
        let diag = run_virtual_sequence(&task, manifest.rounds, p).map_err(CliError::runtime)?;
        let report = ConvergenceReport::new(diag);
        eprintln!(
            "{p:?}: tail slope {:.3}, envelope ratio {:.2}, {}",
            report.diagnostics.tail_slope,
            report.envelope.max_ratio,
            if report.passed { "pass" } else { "fail" }
        );
        reports.push(report);
    }
    let passed = reports.iter().all(|r| r.passed);
    let file = ConvergenceFile {
        schema: CONVERGENCE_SCHEMA,
        rounds: manifest.rounds,
        task: &manifest.task,
        reports: &reports,
    };
    let mut bytes = serde_json::to_vec_pretty(&file).map_err(CliError::runtime)?;
    bytes.push(b'\n');
    fsutil::write_atomic(out, &bytes)?;
    Ok((reports, passed))
}
