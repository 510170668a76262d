//! Experiment manifests: a base run configuration, optional named variants
//! and sweep axes, expanded into one planned row per combination.
//!
//! ```toml
//! name = "thresholds"
//! output_dir = "out/thresholds"
//! repeat = 3
//!
//! [base]
//! mode = "dfl"
//! rounds = 60
//!
//! [[runs]]
//! label = "fedavg"
//! mode = "fedavg"
//!
//! [sweep]
//! threshold = [0.0, 0.5, 1.0]
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dfl_core::protocol::{DatasetSpec, RunConfig};
use serde::Deserialize;
use toml::{Table, Value};

use crate::error::{CliError, Result};
use crate::fsutil;

/// Sweep axis that expands to a thresholded dynamic schedule.
pub const THRESHOLD_AXIS: &str = "threshold";

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    name: Option<String>,
    output_dir: Option<PathBuf>,
    #[serde(default = "one")]
    repeat: usize,
    #[serde(default)]
    base: Table,
    #[serde(default)]
    runs: Vec<Table>,
    #[serde(default)]
    sweep: BTreeMap<String, Vec<Value>>,
}

fn one() -> usize {
    1
}

/// One summary row: a configuration repeated over `repeat` seeds.
#[derive(Debug, Clone)]
pub struct Variant {
    pub label: String,
    pub sweep: BTreeMap<String, Value>,
    /// Configuration for the first repeat; later repeats add 1, 2, ... to its seed.
    pub config: RunConfig,
}

#[derive(Debug, Clone)]
pub struct ExperimentManifest {
    pub name: String,
    pub output_dir: PathBuf,
    pub repeat: usize,
    pub variants: Vec<Variant>,
}

impl ExperimentManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fsutil::read_to_string(path)?;
        let base_dir = path.parent().unwrap_or_else(|| Path::new("."));
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("experiment");
        Self::parse(&text, base_dir, stem).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// `base_dir` anchors relative paths; `stem` names the experiment when
    /// the manifest does not.
    pub fn parse(text: &str, base_dir: &Path, stem: &str) -> Result<Self> {
        let raw: RawManifest = toml::from_str(text).map_err(|e| CliError::usage(format!("invalid manifest: {e}")))?;
        if raw.repeat == 0 {
            return Err(CliError::usage("repeat must be at least 1"));
        }
        for (axis, values) in &raw.sweep {
            if values.is_empty() {
                return Err(CliError::usage(format!("sweep axis `{axis}` has no values")));
            }
        }
        let name = raw.name.unwrap_or_else(|| stem.to_string());
        let output_dir = match raw.output_dir {
            Some(p) => base_dir.join(p),
            None => base_dir.join(format!("{name}-out")),
        };

        let runs = if raw.runs.is_empty() { vec![Table::new()] } else { raw.runs };
        let mut variants = Vec::new();
        for run in runs {
            let mut overrides = run;
            let label = match overrides.remove("label") {
                Some(Value::String(s)) => Some(s),
                Some(other) => return Err(CliError::usage(format!("run label must be a string, got {other}"))),
                None => None,
            };
            let mut merged = raw.base.clone();
            merge(&mut merged, overrides);
            for point in sweep_points(&raw.sweep) {
                let mut table = merged.clone();
                for (axis, value) in &point {
                    apply_axis(&mut table, axis, value.clone());
                }
                let mut config: RunConfig = Value::Table(table)
                    .try_into()
                    .map_err(|e: toml::de::Error| CliError::usage(format!("invalid run configuration: {e}")))?;
                config.validate().map_err(CliError::usage)?;
                if let DatasetSpec::Mnist { dir } = &mut config.dataset {
                    *dir = base_dir.join(&*dir);
                }
                let base_label = label.clone().unwrap_or_else(|| config.mode.to_string());
                variants.push(Variant {
                    label: row_label(&base_label, &point),
                    sweep: point,
                    config,
                });
            }
        }
        Ok(Self {
            name,
            output_dir,
            repeat: raw.repeat,
            variants,
        })
    }
}

/// Recursively overlays `over` onto `base`; nested tables merge key by key.
fn merge(base: &mut Table, over: Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

fn apply_axis(table: &mut Table, axis: &str, value: Value) {
    if axis == THRESHOLD_AXIS {
        let mut schedule = Table::new();
        schedule.insert("kind".into(), Value::String("dynamic_with_threshold".into()));
        schedule.insert("threshold".into(), value);
        table.insert("schedule".into(), Value::Table(schedule));
    } else {
        table.insert(axis.to_string(), value);
    }
}

/// Cartesian product of the sweep axes in key order; a single empty point
/// when there are no axes.
fn sweep_points(sweep: &BTreeMap<String, Vec<Value>>) -> Vec<BTreeMap<String, Value>> {
    let mut points = vec![BTreeMap::new()];
    for (axis, values) in sweep {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut next = p.clone();
                    next.insert(axis.clone(), v.clone());
                    next
                })
            })
            .collect();
    }
    points
}

fn row_label(base: &str, point: &BTreeMap<String, Value>) -> String {
    let mut label = base.to_string();
    for (axis, value) in point {
        let shown = match value {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        label.push_str(&format!(" {axis}={shown}"));
    }
    label
}
