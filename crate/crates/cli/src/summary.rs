//! Summary artifacts and the cross-summary comparison table.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::fsutil;
use crate::manifest::THRESHOLD_AXIS;

pub const SUMMARY_SCHEMA: &str = "dfl-summary/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: String,
    pub name: String,
    pub rows: Vec<SummaryRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub mode: String,
    /// Sweep coordinates of this row, if any.
    pub sweep: BTreeMap<String, serde_json::Value>,
    pub seeds: Vec<u64>,
    pub final_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub stddev_accuracy: f64,
    /// Cumulative upload plus download bytes at the last round, averaged over seeds.
    pub total_bytes: u64,
    /// Run directories relative to the experiment output directory.
    pub run_dirs: Vec<String>,
}

impl SummaryRow {
    pub fn threshold(&self) -> Option<f64> {
        self.sweep.get(THRESHOLD_AXIS).and_then(|v| v.as_f64())
    }
}

pub fn mean_and_stddev(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

impl Summary {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fsutil::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("{}: not a JSON summary: {e}", path.display())))?;
        match value.get("schema").and_then(|s| s.as_str()) {
            Some(SUMMARY_SCHEMA) => {}
            Some(other) => {
                return Err(CliError::usage(format!(
                    "{}: schema `{other}` is not supported, expected `{SUMMARY_SCHEMA}`",
                    path.display()
                )))
            }
            None => return Err(CliError::usage(format!("{}: missing schema field", path.display()))),
        }
        serde_json::from_value(value).map_err(|e| CliError::usage(format!("{}: malformed summary: {e}", path.display())))
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("summary serialises");
        bytes.push(b'\n');
        bytes
    }
}

fn cell(row: &SummaryRow) -> String {
    format!(
        "{:.2} +/- {:.2} ({} B)",
        100.0 * row.mean_accuracy,
        100.0 * row.stddev_accuracy,
        row.total_bytes
    )
}

/// Renders an aligned table with one column per summary and one row per
/// label. `*` marks the best mean accuracy in each row; `spread` is the gap
/// in points between the best and worst summary. Threshold sweeps get an
/// extra listing ordered by threshold with the best row marked.
pub fn render_comparison(named: &[(String, Summary)]) -> String {
    let mut labels: Vec<&str> = Vec::new();
    for (_, s) in named {
        for r in &s.rows {
            if !labels.contains(&r.label.as_str()) {
                labels.push(&r.label);
            }
        }
    }

    let mut header = vec!["label".to_string()];
    header.extend(named.iter().map(|(n, _)| n.clone()));
    header.push("spread".into());
    let mut body: Vec<Vec<String>> = Vec::new();
    for label in &labels {
        let found: Vec<Option<&SummaryRow>> = named
            .iter()
            .map(|(_, s)| s.rows.iter().find(|r| r.label == *label))
            .collect();
        let means: Vec<f64> = found.iter().flatten().map(|r| r.mean_accuracy).collect();
        let best = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let worst = means.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut line = vec![label.to_string()];
        for r in &found {
            line.push(match r {
                Some(r) if means.len() > 1 && r.mean_accuracy == best => format!("{} *", cell(r)),
                Some(r) => cell(r),
                None => "-".into(),
            });
        }
        line.push(if means.len() > 1 {
            format!("{:.2}", 100.0 * (best - worst))
        } else {
            "-".into()
        });
        body.push(line);
    }

    let mut out = String::new();
    write_table(&mut out, &header, &body);

    for (name, s) in named {
        let mut sweep: Vec<&SummaryRow> = s.rows.iter().filter(|r| r.threshold().is_some()).collect();
        if sweep.is_empty() {
            continue;
        }
        sweep.sort_by(|a, b| a.threshold().partial_cmp(&b.threshold()).unwrap().then(a.label.cmp(&b.label)));
        let best = sweep.iter().map(|r| r.mean_accuracy).fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(out, "\nthreshold sweep in {name}:");
        let rows: Vec<Vec<String>> = sweep
            .iter()
            .map(|r| {
                let mut line = vec![
                    format!("{}", r.threshold().unwrap()),
                    r.label.clone(),
                    format!("{:.2}", 100.0 * r.mean_accuracy),
                ];
                if r.mean_accuracy == best {
                    line.push("<- best".into());
                }
                line
            })
            .collect();
        write_table(&mut out, &["threshold".into(), "label".into(), "accuracy".into()], &rows);
    }
    out
}

fn write_table(out: &mut String, header: &[String], rows: &[Vec<String>]) {
    let cols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate().take(cols) {
            widths[i] = widths[i].max(c.len());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            if i < cols {
                let _ = write!(s, "{c:<w$}", w = widths[i]);
            } else {
                s.push_str(c);
            }
        }
        s.trim_end().to_string()
    };
    let _ = writeln!(out, "{}", line(header));
    let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    for r in rows {
        let _ = writeln!(out, "{}", line(r));
    }
}
