//! Data preparation, training and evaluation glued together the way the
//! command-line tool runs them.
//!
//! Test windows are those whose target minutes start inside a home's test
//! split. Their inputs may reach back into the training period (past load
//! is known at prediction time), so every history length is scored on the
//! same set of target minutes.

use crate::checkpoint::init_model;
use crate::config::RunConfig;
use crate::dataio::{
    apply_scaler, build_windows, chronological_split, fit_scaler, label_events, unlabeled,
    LabeledSeries, MeterSeries, Scaler, WindowSet,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, PredictionSet};
use crate::model::Model;
use crate::train::{predict_windows, train, TrainHistory};
use rayon::prelude::*;
use std::collections::BTreeMap;

/// Labeled series with each home's chronological cut and the scaler fitted
/// on the training side.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub series: Vec<LabeledSeries>,
    /// Index of the first test record per series.
    pub cuts: Vec<usize>,
    pub scaler: Option<Scaler>,
}

pub fn label_all(
    homes: &BTreeMap<String, MeterSeries>,
    threshold_kw: f64,
) -> Result<Vec<LabeledSeries>> {
    homes.values().map(|s| label_events(s, threshold_kw)).collect()
}

pub fn split_data(homes: &BTreeMap<String, MeterSeries>, config: &RunConfig) -> Result<SplitData> {
    if homes.is_empty() {
        return Err(Error::Empty("no meter records".into()));
    }
    let series = label_all(homes, config.label_threshold_kw)?;
    let mut cuts = Vec::with_capacity(series.len());
    let mut train = Vec::with_capacity(series.len());
    for s in &series {
        let (head, _) = chronological_split(s, config.train_fraction)?;
        cuts.push(head.len());
        train.push(head);
    }
    let scaler = if config.normalize {
        Some(fit_scaler(&train)?)
    } else {
        None
    };
    Ok(SplitData {
        series,
        cuts,
        scaler,
    })
}

fn scale(windows: WindowSet, scaler: Option<&Scaler>) -> Result<WindowSet> {
    match scaler {
        Some(s) => apply_scaler(&windows, s),
        None => Ok(windows),
    }
}

fn concat(parts: Vec<WindowSet>, history_len: usize, horizon: usize) -> Result<WindowSet> {
    let mut out = WindowSet::empty(history_len, horizon);
    for p in parts {
        out.extend(p)?;
    }
    Ok(out)
}

impl SplitData {
    pub fn train_series(&self) -> Vec<LabeledSeries> {
        self.series
            .iter()
            .zip(&self.cuts)
            .map(|(s, &c)| s.slice(0..c))
            .collect()
    }

    /// Windows lying entirely in the training side of every home.
    pub fn train_windows(&self, history_len: usize, horizon: usize, stride: usize) -> Result<WindowSet> {
        let parts = self
            .series
            .par_iter()
            .zip(&self.cuts)
            .map(|(s, &c)| build_windows(&s.slice(0..c), history_len, horizon, stride))
            .collect::<Result<Vec<_>>>()?;
        scale(concat(parts, history_len, horizon)?, self.scaler.as_ref())
    }

    /// Windows whose first target minute falls in the test side.
    pub fn test_windows(&self, history_len: usize, horizon: usize, stride: usize) -> Result<WindowSet> {
        let parts = self
            .series
            .par_iter()
            .zip(&self.cuts)
            .map(|(s, &c)| {
                let offset = c.saturating_sub(history_len);
                let mut w = build_windows(&s.slice(offset..s.len()), history_len, horizon, stride)?;
                let keep: Vec<usize> = (0..w.len())
                    .filter(|&i| offset + w.start(i) + history_len >= c)
                    .collect();
                if keep.len() != w.len() {
                    w = w.select(&keep);
                }
                Ok(w)
            })
            .collect::<Result<Vec<_>>>()?;
        scale(concat(parts, history_len, horizon)?, self.scaler.as_ref())
    }
}

pub fn fit_model(config: &RunConfig, data: &SplitData) -> Result<(Model, TrainHistory)> {
    let windows = data.train_windows(config.history_len, config.horizon, config.train_window_stride)?;
    train(init_model(config)?, &windows, &config.train_config())
}

pub fn evaluate_model(model: &Model, config: &RunConfig, data: &SplitData) -> Result<(EvalReport, PredictionSet)> {
    let windows = data.test_windows(config.history_len, config.horizon, config.test_window_stride)?;
    if windows.is_empty() {
        return Err(Error::Empty("no test windows".into()));
    }
    let preds = PredictionSet::from_windows(predict_windows(model, &windows)?, &windows)?;
    Ok((evaluate(&preds, config.prob_threshold)?, preds))
}

/// Windows over whole series for inference, scaled with `scaler` where a
/// home is known and with the home's own statistics otherwise.
pub fn inference_windows(
    homes: &BTreeMap<String, MeterSeries>,
    config: &RunConfig,
    scaler: Option<&Scaler>,
) -> Result<WindowSet> {
    let series: Vec<LabeledSeries> = homes
        .values()
        .map(|s| {
            if s.has_ev_load() {
                label_events(s, config.label_threshold_kw)
            } else {
                Ok(unlabeled(s))
            }
        })
        .collect::<Result<_>>()?;
    let mut parts = Vec::with_capacity(series.len());
    for s in &series {
        let w = build_windows(s, config.history_len, config.horizon, config.test_window_stride)?;
        let w = match scaler {
            Some(sc) if sc.homes.contains_key(&s.home_id) => apply_scaler(&w, sc)?,
            Some(_) => apply_scaler(&w, &fit_scaler(std::slice::from_ref(s))?)?,
            None => w,
        };
        parts.push(w);
    }
    concat(parts, config.history_len, config.horizon)
}
