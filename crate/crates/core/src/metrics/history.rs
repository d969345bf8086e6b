use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline::{evaluate_model, fit_model, SplitData};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub history_len: usize,
    pub n_patches: usize,
    pub f1: f64,
    pub acc: f64,
    pub auc: Option<f64>,
    pub ap: Option<f64>,
    /// F1 at each horizon, `m = 1..M`.
    pub f1_by_horizon: Vec<f64>,
    pub train_windows: usize,
    pub test_windows: usize,
    pub best_epoch: Option<usize>,
    /// Wall time of training plus evaluation; not part of the result proper.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seconds: Option<f64>,
}

/// Trains and scores one model per history length on the same split, in
/// the given order. Every `T` is validated before any training starts.
pub fn history_length_sweep(config: &RunConfig, data: &SplitData, lengths: &[usize]) -> Result<Vec<HistoryRow>> {
    let configs: Vec<RunConfig> = lengths
        .iter()
        .map(|&t| RunConfig {
            history_len: t,
            ..config.clone()
        })
        .collect();
    let bad: Vec<String> = configs
        .iter()
        .filter_map(|c| c.validate().err().map(|e| format!("T={}: {e}", c.history_len)))
        .collect();
    if !bad.is_empty() {
        return Err(Error::Config(bad.join("; ")));
    }
    configs
        .iter()
        .map(|c| {
            let start = Instant::now();
            let (model, history) = fit_model(c, data)?;
            let (report, _) = evaluate_model(&model, c, data)?;
            Ok(HistoryRow {
                history_len: c.history_len,
                n_patches: c.model_config().n_patches(),
                f1: report.f1,
                acc: report.acc,
                auc: report.auc,
                ap: report.ap,
                f1_by_horizon: report.per_horizon.iter().map(|r| r.f1).collect(),
                train_windows: history.train_windows + history.val_windows,
                test_windows: (report.n / c.horizon as u64) as usize,
                best_epoch: history.best_epoch,
                seconds: Some(start.elapsed().as_secs_f64()),
            })
        })
        .collect()
}

/// Columns `history_len,n_patches,f1,acc,auc,ap`.
pub fn write_history_csv<W: Write>(rows: &[HistoryRow], comments: &[String], mut out: W) -> Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["history_len", "n_patches", "f1", "acc", "auc", "ap"])?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for r in rows {
        w.write_record([
            r.history_len.to_string(),
            r.n_patches.to_string(),
            r.f1.to_string(),
            r.acc.to_string(),
            opt(r.auc),
            opt(r.ap),
        ])?;
    }
    w.flush()?;
    Ok(())
}
