//! Label-wise soft targets: a `C x C` row-stochastic matrix whose row `c` is
//! the mean predicted distribution over samples with hard label `c`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Prediction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftTargetMatrix {
    num_classes: usize,
    rows: Vec<f64>,
    row_counts: Vec<u64>,
}

/// How device matrices are combined on the server.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftAggregation {
    /// Every row weighted by the device dataset size.
    Literal,
    /// Row `c` weighted by each device's sample count for label `c`; rows
    /// nobody observed keep the previous global value.
    #[default]
    PerLabel,
}

impl SoftTargetMatrix {
    /// Uniform `1/C` rows with zero counts.
    pub fn uniform(num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Validation(format!(
                "soft targets need at least two classes, got {num_classes}"
            )));
        }
        Ok(Self {
            num_classes,
            rows: vec![1.0 / num_classes as f64; num_classes * num_classes],
            row_counts: vec![0; num_classes],
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, row_counts: Vec<u64>) -> Result<Self> {
        let c = rows.len();
        if c < 2 || rows.iter().any(|r| r.len() != c) || row_counts.len() != c {
            return Err(Error::Dimension(format!(
                "soft targets must be square with one count per row, got {c} rows"
            )));
        }
        Ok(Self {
            num_classes: c,
            rows: rows.into_iter().flatten().collect(),
            row_counts,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, label: usize) -> &[f64] {
        let c = self.num_classes;
        &self.rows[label * c..(label + 1) * c]
    }

    pub fn row_counts(&self) -> &[u64] {
        &self.row_counts
    }

    /// Row-major entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.rows
    }

    /// Size of the matrix on the wire: `C^2` 64-bit reals.
    pub fn payload_bytes(&self) -> u64 {
        soft_payload_bytes(self.num_classes)
    }

    /// Size of the per-row sample counts uploaded with the matrix.
    pub fn counts_bytes(&self) -> u64 {
        counts_payload_bytes(self.num_classes)
    }

    pub fn max_abs_diff(&self, other: &SoftTargetMatrix) -> f64 {
        self.rows
            .iter()
            .zip(&other.rows)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `C` as a little-endian `u32`, then `C^2` little-endian `f64` entries.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.rows.len() * 8);
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Inverse of [`to_bytes`](Self::to_bytes); counts are not on the wire and come back as zero.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header: [u8; 4] = bytes
            .get(..4)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::Serialization("soft-target blob shorter than its header".into()))?;
        let c = u32::from_le_bytes(header) as usize;
        let body = &bytes[4..];
        if c < 2 || body.len() != c * c * 8 {
            return Err(Error::Serialization(format!(
                "soft-target blob for C = {c} must carry {} bytes, found {}",
                c * c * 8,
                body.len()
            )));
        }
        let rows = body
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Self {
            num_classes: c,
            rows,
            row_counts: vec![0; c],
        })
    }

    fn renormalize(&mut self) {
        let c = self.num_classes;
        for row in self.rows.chunks_exact_mut(c) {
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                row.iter_mut().for_each(|v| *v /= sum);
            } else {
                row.iter_mut().for_each(|v| *v = 1.0 / c as f64);
            }
        }
    }
}

pub fn soft_payload_bytes(num_classes: usize) -> u64 {
    (num_classes * num_classes * 8) as u64
}

pub fn counts_payload_bytes(num_classes: usize) -> u64 {
    (num_classes * 8) as u64
}

pub fn init_soft_targets(num_classes: usize) -> Result<SoftTargetMatrix> {
    SoftTargetMatrix::uniform(num_classes)
}

/// Per-label mean of prediction vectors. Labels without samples keep a
/// uniform row and a zero count.
pub fn label_wise_average(predictions: &[(Prediction, usize)], num_classes: usize) -> Result<SoftTargetMatrix> {
    if predictions.is_empty() {
        return Err(Error::Validation("label-wise average of an empty prediction list".into()));
    }
    let mut acc = LabelWiseAccumulator::new(num_classes)?;
    for (pred, label) in predictions {
        acc.add(&pred.probs, *label)?;
    }
    Ok(acc.finish())
}

/// Streaming form of [`label_wise_average`] that avoids materialising predictions.
pub struct LabelWiseAccumulator {
    num_classes: usize,
    sums: Vec<f64>,
    counts: Vec<u64>,
}

impl LabelWiseAccumulator {
    pub fn new(num_classes: usize) -> Result<Self> {
        SoftTargetMatrix::uniform(num_classes)?;
        Ok(Self {
            num_classes,
            sums: vec![0.0; num_classes * num_classes],
            counts: vec![0; num_classes],
        })
    }

    pub fn add(&mut self, probs: &[f64], label: usize) -> Result<()> {
        let c = self.num_classes;
        if label >= c {
            return Err(Error::Validation(format!("hard label {label} out of range for {c} classes")));
        }
        if probs.len() != c {
            return Err(Error::Dimension(format!("prediction has {} classes, expected {c}", probs.len())));
        }
        for (s, p) in self.sums[label * c..(label + 1) * c].iter_mut().zip(probs) {
            *s += p;
        }
        self.counts[label] += 1;
        Ok(())
    }

    pub fn finish(self) -> SoftTargetMatrix {
        let c = self.num_classes;
        let mut rows = self.sums;
        for (row, &n) in rows.chunks_exact_mut(c).zip(&self.counts) {
            if n == 0 {
                row.iter_mut().for_each(|v| *v = 1.0 / c as f64);
            } else {
                row.iter_mut().for_each(|v| *v /= n as f64);
            }
        }
        SoftTargetMatrix {
            num_classes: c,
            rows,
            row_counts: self.counts,
        }
    }
}

/// Combines device matrices into a new global matrix. `updates` pairs each
/// matrix with its device's dataset size and is folded in the given order.
pub fn aggregate_soft_targets(
    updates: &[(&SoftTargetMatrix, usize)],
    mode: SoftAggregation,
    previous: &SoftTargetMatrix,
) -> Result<SoftTargetMatrix> {
    let c = previous.num_classes;
    if updates.is_empty() {
        return Err(Error::Validation("no soft-target updates to aggregate".into()));
    }
    if let Some((m, _)) = updates.iter().find(|(m, _)| m.num_classes != c) {
        return Err(Error::Dimension(format!(
            "soft-target matrices disagree on class count: {} vs {c}",
            m.num_classes
        )));
    }
    if updates.iter().any(|&(_, size)| size == 0) {
        return Err(Error::Validation("device dataset sizes must be positive".into()));
    }

    let mut out = SoftTargetMatrix {
        num_classes: c,
        rows: vec![0.0; c * c],
        row_counts: vec![0; c],
    };
    for (m, _) in updates {
        for (total, n) in out.row_counts.iter_mut().zip(&m.row_counts) {
            *total += n;
        }
    }

    match mode {
        SoftAggregation::Literal => {
            let total: f64 = updates.iter().map(|&(_, size)| size as f64).sum();
            for (m, size) in updates {
                let w = *size as f64;
                for (o, v) in out.rows.iter_mut().zip(&m.rows) {
                    *o += w * v;
                }
            }
            out.rows.iter_mut().for_each(|v| *v /= total);
        }
        SoftAggregation::PerLabel => {
            for label in 0..c {
                let total: u64 = updates.iter().map(|(m, _)| m.row_counts[label]).sum();
                let dst = &mut out.rows[label * c..(label + 1) * c];
                if total == 0 {
                    dst.copy_from_slice(previous.row(label));
                    continue;
                }
                for (m, _) in updates {
                    let n = m.row_counts[label];
                    if n == 0 {
                        continue;
                    }
                    let w = n as f64;
                    for (o, v) in dst.iter_mut().zip(m.row(label)) {
                        *o += w * v;
                    }
                }
                dst.iter_mut().for_each(|v| *v /= total as f64);
            }
        }
    }
    out.renormalize();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(probs: &[f64]) -> Prediction {
        Prediction {
            logits: vec![0.0; probs.len()],
            probs: probs.to_vec(),
        }
    }

    #[test]
    fn uniform_initialisation_and_payload_sizes() {
        let m = init_soft_targets(10).unwrap();
        assert!(m.as_slice().iter().all(|&v| v == 0.1));
        assert!(m.row_counts().iter().all(|&n| n == 0));
        assert_eq!(m.payload_bytes(), 800);
        assert_eq!(init_soft_targets(20).unwrap().payload_bytes(), 3200);
        assert!(init_soft_targets(1).is_err());
    }

    #[test]
    fn single_sample_rows_copy_the_prediction() {
        let preds = vec![(pred(&[0.9, 0.1]), 0), (pred(&[0.2, 0.8]), 1)];
        let m = label_wise_average(&preds, 2).unwrap();
        assert_eq!(m.row(0), &[0.9, 0.1]);
        assert_eq!(m.row(1), &[0.2, 0.8]);
        assert_eq!(m.row_counts(), &[1, 1]);
    }

    #[test]
    fn two_point_mean_and_missing_label() {
        let preds = vec![(pred(&[1.0, 0.0, 0.0]), 0), (pred(&[0.0, 1.0, 0.0]), 0)];
        let m = label_wise_average(&preds, 3).unwrap();
        assert_eq!(m.row(0), &[0.5, 0.5, 0.0]);
        assert_eq!(m.row(2), &[1.0 / 3.0; 3]);
        assert_eq!(m.row_counts(), &[2, 0, 0]);
    }

    #[test]
    fn label_wise_average_errors() {
        assert!(label_wise_average(&[], 3).is_err());
        assert!(label_wise_average(&[(pred(&[0.5, 0.5]), 2)], 2).is_err());
    }

    #[test]
    fn literal_weighted_mean() {
        let a = SoftTargetMatrix::from_rows(vec![vec![1.0, 0.0], vec![0.5, 0.5]], vec![1, 1]).unwrap();
        let b = SoftTargetMatrix::from_rows(vec![vec![0.0, 1.0], vec![0.5, 0.5]], vec![1, 1]).unwrap();
        let prev = init_soft_targets(2).unwrap();
        let out = aggregate_soft_targets(&[(&a, 100), (&b, 300)], SoftAggregation::Literal, &prev).unwrap();
        assert!((out.row(0)[0] - 0.25).abs() < 1e-15);
        assert!((out.row(0)[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn single_device_passes_through() {
        let a = SoftTargetMatrix::from_rows(vec![vec![0.7, 0.3], vec![0.4, 0.6]], vec![2, 3]).unwrap();
        let prev = init_soft_targets(2).unwrap();
        for mode in [SoftAggregation::Literal, SoftAggregation::PerLabel] {
            let out = aggregate_soft_targets(&[(&a, 5)], mode, &prev).unwrap();
            assert!(out.max_abs_diff(&a) < 1e-15);
        }
    }

    #[test]
    fn per_label_ignores_devices_without_the_label() {
        let seen = SoftTargetMatrix::from_rows(vec![vec![0.9, 0.1], vec![0.3, 0.7]], vec![4, 2]).unwrap();
        let blind = SoftTargetMatrix::from_rows(vec![vec![0.6, 0.4], vec![0.5, 0.5]], vec![6, 0]).unwrap();
        let prev = SoftTargetMatrix::from_rows(vec![vec![0.5, 0.5], vec![0.2, 0.8]], vec![0, 0]).unwrap();
        let out = aggregate_soft_targets(&[(&seen, 6), (&blind, 6)], SoftAggregation::PerLabel, &prev).unwrap();
        assert!((out.row(1)[0] - 0.3).abs() < 1e-15);
        // 0.4 * 0.9 + 0.6 * 0.6
        assert!((out.row(0)[0] - 0.72).abs() < 1e-15);

        let none = SoftTargetMatrix::from_rows(vec![vec![0.6, 0.4], vec![0.5, 0.5]], vec![3, 0]).unwrap();
        let out = aggregate_soft_targets(&[(&none, 3)], SoftAggregation::PerLabel, &prev).unwrap();
        assert_eq!(out.row(1), prev.row(1));
    }

    #[test]
    fn mixed_class_counts_are_rejected() {
        let a = init_soft_targets(2).unwrap();
        let b = init_soft_targets(3).unwrap();
        let err = aggregate_soft_targets(&[(&a, 1), (&b, 1)], SoftAggregation::Literal, &a);
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn wire_format_layout() {
        let m = SoftTargetMatrix::from_rows(vec![vec![0.25, 0.75], vec![1.0, 0.0]], vec![1, 1]).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(bytes.len(), 4 + 32);
        assert_eq!(&bytes[..4], &[2, 0, 0, 0]);
        assert_eq!(&bytes[4..12], &0.25f64.to_le_bytes());
        let back = SoftTargetMatrix::from_bytes(&bytes).unwrap();
        assert_eq!(back.as_slice(), m.as_slice());
        assert!(SoftTargetMatrix::from_bytes(&bytes[..20]).is_err());
    }
}
