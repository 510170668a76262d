use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One row of the per-round metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub mode: String,
    pub rho: f64,
    pub global_accuracy: f64,
    pub mean_local_loss: f64,
    pub upload_bytes: u64,
    pub download_bytes: u64,
    pub cumulative_bytes: u64,
}

pub fn write_metrics_csv<W: Write>(records: &[RoundMetrics], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for r in records {
        writer.serialize(r)?;
    }
    writer.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn metrics_csv_bytes(records: &[RoundMetrics]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_metrics_csv(records, &mut buf)?;
    Ok(buf)
}

pub fn write_metrics_jsonl<W: Write>(records: &[RoundMetrics], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(serde_json::Error::io)?;
    }
    Ok(())
}

pub fn read_metrics_csv<R: std::io::Read>(input: R) -> Result<Vec<RoundMetrics>> {
    let mut reader = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}
