//! Thresholded confusion metrics, rank metrics (AUC, AP), MSE, and the
//! threshold, horizon and history-length experiment tables.
//!
//! A prediction is active iff its probability is strictly greater than the
//! threshold, so a probability equal to the threshold counts as inactive.
//! Pooled metrics concatenate every horizon's predictions.

mod history;
mod sweep;

pub use history::{history_length_sweep, write_history_csv, HistoryRow};
pub use sweep::{threshold_grid, threshold_sweep, write_sweep_csv, SweepRow, ThresholdSweep};

use crate::dataio::WindowSet;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Flat `(probability, label, horizon)` triples; horizons are 1-based
/// minutes ahead.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionSet {
    pub probs: Vec<f64>,
    pub labels: Vec<u8>,
    pub horizons: Vec<usize>,
}

impl PredictionSet {
    pub fn new(probs: Vec<f64>, labels: Vec<u8>, horizons: Vec<usize>) -> Result<Self> {
        if probs.len() != labels.len() || probs.len() != horizons.len() {
            return Err(Error::dim(
                "PredictionSet",
                &[probs.len(), labels.len()],
                &[horizons.len()],
            ));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidTensor(format!("probability {p} outside [0, 1]")));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::InvalidTensor("labels must be 0 or 1".into()));
        }
        Ok(PredictionSet {
            probs,
            labels,
            horizons,
        })
    }

    /// Single-horizon set (every entry at horizon 1).
    pub fn flat(probs: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let n = probs.len();
        PredictionSet::new(probs, labels, vec![1; n])
    }

    /// Pairs window-major model outputs with the window targets.
    pub fn from_windows(probs: Vec<f64>, windows: &WindowSet) -> Result<Self> {
        let m = windows.horizon();
        if probs.len() != windows.len() * m {
            return Err(Error::dim("from_windows", &[probs.len()], &[windows.len() * m]));
        }
        let mut labels = Vec::with_capacity(probs.len());
        let mut horizons = Vec::with_capacity(probs.len());
        for i in 0..windows.len() {
            labels.extend(windows.target(i).iter().map(|&y| y as u8));
            horizons.extend(1..=m);
        }
        PredictionSet::new(probs, labels, horizons)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Distinct horizons in increasing order.
    pub fn horizon_values(&self) -> Vec<usize> {
        let mut h = self.horizons.clone();
        h.sort_unstable();
        h.dedup();
        h
    }

    pub fn at_horizon(&self, m: usize) -> PredictionSet {
        let mut out = PredictionSet::default();
        for i in 0..self.len() {
            if self.horizons[i] == m {
                out.probs.push(self.probs[i]);
                out.labels.push(self.labels[i]);
                out.horizons.push(m);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(probs: &[f64], labels: &[u8], threshold: f64) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&p, &y) in probs.iter().zip(labels) {
        match (p > threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

pub fn confusion_at(preds: &PredictionSet, threshold: f64) -> ConfusionCounts {
    confusion(&preds.probs, &preds.labels, threshold)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn precision(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fp)
}

pub fn recall(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fn_)
}

/// `2TP / (2TP + FP + FN)`, which equals the harmonic mean of precision
/// and recall whenever both are defined.
pub fn f1(c: &ConfusionCounts) -> f64 {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

pub fn accuracy(c: &ConfusionCounts) -> f64 {
    ratio(c.tp + c.tn, c.total())
}

fn class_counts(labels: &[u8]) -> (u64, u64) {
    let pos = labels.iter().filter(|&&y| y == 1).count() as u64;
    (pos, labels.len() as u64 - pos)
}

/// Indices sorted by score, ascending.
fn order(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    idx
}

/// `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)` by sorting. The pair counts are exact
/// integers; the only rounding is the final division.
pub fn roc_auc(probs: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs at least one positive and one negative label".into(),
        ));
    }
    let idx = order(probs);
    // twice the Mann-Whitney U: 2·wins + ties
    let mut doubled: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut g = 0;
    while g < idx.len() {
        let mut end = g;
        let (mut p, mut n) = (0u128, 0u128);
        while end < idx.len() && probs[idx[end]] == probs[idx[g]] {
            if labels[idx[end]] == 1 {
                p += 1;
            } else {
                n += 1;
            }
            end += 1;
        }
        doubled += 2 * p * neg_below + p * n;
        neg_below += n;
        g = end;
    }
    Ok(doubled as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Step-wise `Σ (Rₙ − Rₙ₋₁) Pₙ` over descending distinct scores; tied
/// scores form a single step.
pub fn average_precision(probs: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = class_counts(labels);
    if pos == 0 {
        return Err(Error::UndefinedMetric("AP needs at least one positive label".into()));
    }
    let mut idx = order(probs);
    idx.reverse();
    let (mut tp, mut seen, mut ap) = (0u64, 0u64, 0.0);
    let mut g = 0;
    while g < idx.len() {
        let mut end = g;
        let mut step_pos = 0u64;
        while end < idx.len() && probs[idx[end]] == probs[idx[g]] {
            step_pos += u64::from(labels[idx[end]]);
            end += 1;
        }
        tp += step_pos;
        seen += (end - g) as u64;
        if step_pos > 0 {
            ap += step_pos as f64 * (tp as f64 / seen as f64);
        }
        g = end;
    }
    Ok(ap / pos as f64)
}

pub fn mse(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Empty("MSE of an empty prediction set".into()));
    }
    // summed in sorted order so the result does not depend on entry order
    let mut sq: Vec<f64> = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| (p - y as f64).powi(2))
        .collect();
    sq.sort_by(f64::total_cmp);
    Ok(sq.iter().sum::<f64>() / probs.len() as f64)
}

/// Every metric for one slice of predictions at one threshold. AUC and AP
/// are `None` when a class is missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub horizon_min: Option<usize>,
    pub n: u64,
    pub auc: Option<f64>,
    pub ap: Option<f64>,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub acc: f64,
    pub mse: f64,
    pub threshold: f64,
    pub counts: ConfusionCounts,
}

pub fn metric_row(preds: &PredictionSet, threshold: f64) -> Result<MetricRow> {
    let counts = confusion_at(preds, threshold);
    Ok(MetricRow {
        horizon_min: None,
        n: counts.total(),
        auc: roc_auc(&preds.probs, &preds.labels).ok(),
        ap: average_precision(&preds.probs, &preds.labels).ok(),
        f1: f1(&counts),
        precision: precision(&counts),
        recall: recall(&counts),
        acc: accuracy(&counts),
        mse: mse(&preds.probs, &preds.labels)?,
        threshold,
        counts,
    })
}

/// One row per horizon `m`, in increasing `m`. The result does not depend
/// on the order of entries in `preds`.
pub fn per_horizon_report(preds: &PredictionSet, threshold: f64) -> Result<Vec<MetricRow>> {
    preds
        .horizon_values()
        .into_iter()
        .map(|m| {
            let mut row = metric_row(&preds.at_horizon(m), threshold)?;
            row.horizon_min = Some(m);
            Ok(row)
        })
        .collect()
}

/// Pooled metrics plus the per-horizon breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1: f64,
    pub auc: Option<f64>,
    pub ap: Option<f64>,
    pub acc: f64,
    pub mse: f64,
    pub precision: f64,
    pub recall: f64,
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub n: u64,
    /// How the headline numbers combine horizons.
    pub pooling: String,
    pub per_horizon: Vec<MetricRow>,
}

pub fn evaluate(preds: &PredictionSet, threshold: f64) -> Result<EvalReport> {
    let pooled = metric_row(preds, threshold)?;
    Ok(EvalReport {
        f1: pooled.f1,
        auc: pooled.auc,
        ap: pooled.ap,
        acc: pooled.acc,
        mse: pooled.mse,
        precision: pooled.precision,
        recall: pooled.recall,
        threshold,
        counts: pooled.counts,
        n: pooled.n,
        pooling: "all horizons concatenated".into(),
        per_horizon: per_horizon_report(preds, threshold)?,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn comment_lines<W: Write>(out: &mut W, comments: &[String]) -> Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    Ok(())
}

/// Per-horizon table with columns in the order
/// `horizon_min,auc,ap,f1,precision,recall,acc,mse`.
pub fn write_horizon_csv<W: Write>(rows: &[MetricRow], comments: &[String], mut out: W) -> Result<()> {
    comment_lines(&mut out, comments)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["horizon_min", "auc", "ap", "f1", "precision", "recall", "acc", "mse"])?;
    for r in rows {
        w.write_record([
            r.horizon_min.map_or_else(String::new, |m| m.to_string()),
            opt(r.auc),
            opt(r.ap),
            r.f1.to_string(),
            r.precision.to_string(),
            r.recall.to_string(),
            r.acc.to_string(),
            r.mse.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
