use super::{accuracy, confusion_at, f1, precision, recall, ConfusionCounts, PredictionSet};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub acc: f64,
    pub counts: ConfusionCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweep {
    /// One row per grid value, in grid order.
    pub rows: Vec<SweepRow>,
    /// Threshold with the highest F1; the smallest such threshold on ties.
    pub best_threshold: f64,
    pub best_f1: f64,
}

/// Evenly spaced thresholds `lo, lo + step, ..., hi`, rounded to 12
/// decimals so `0.35` prints as `0.35`.
pub fn threshold_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi || step <= 0.0 {
        return Err(Error::Config(format!(
            "threshold grid needs 0 <= lo <= hi <= 1 and step > 0, got {lo}..{hi} by {step}"
        )));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n)
        .map(|i| ((lo + i as f64 * step) * 1e12).round() / 1e12)
        .collect())
}

pub fn threshold_sweep(preds: &PredictionSet, grid: &[f64]) -> Result<ThresholdSweep> {
    if grid.is_empty() {
        return Err(Error::Config("threshold grid is empty".into()));
    }
    if let Some(t) = grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Config(format!("threshold {t} outside [0, 1]")));
    }
    let rows: Vec<SweepRow> = grid
        .iter()
        .map(|&threshold| {
            let counts = confusion_at(preds, threshold);
            SweepRow {
                threshold,
                f1: f1(&counts),
                precision: precision(&counts),
                recall: recall(&counts),
                acc: accuracy(&counts),
                counts,
            }
        })
        .collect();
    let best = rows
        .iter()
        .reduce(|best, r| {
            if r.f1 > best.f1 || (r.f1 == best.f1 && r.threshold < best.threshold) {
                r
            } else {
                best
            }
        })
        .expect("grid is nonempty");
    Ok(ThresholdSweep {
        best_threshold: best.threshold,
        best_f1: best.f1,
        rows,
    })
}

/// Columns `threshold,f1,precision,recall,acc,tp,fp,tn,fn`.
pub fn write_sweep_csv<W: Write>(sweep: &ThresholdSweep, comments: &[String], mut out: W) -> Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["threshold", "f1", "precision", "recall", "acc", "tp", "fp", "tn", "fn"])?;
    for r in &sweep.rows {
        w.write_record([
            r.threshold.to_string(),
            r.f1.to_string(),
            r.precision.to_string(),
            r.recall.to_string(),
            r.acc.to_string(),
            r.counts.tp.to_string(),
            r.counts.fp.to_string(),
            r.counts.tn.to_string(),
            r.counts.fn_.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
