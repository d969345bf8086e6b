//! Mini-batch training with Adam and validation-based model selection.
//!
//! Batch gradients are computed over fixed-size chunks of the batch and
//! summed in chunk order, so the result does not depend on how many threads
//! rayon uses.

use crate::dataio::WindowSet;
use crate::error::{Error, Result};
use crate::metrics::{confusion, f1};
use crate::model::Network;
use crate::tensorkit::{sigmoid_scalar, DiffOp, Reduction, Tensor, BCE_CLAMP};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Windows per gradient work unit.
const CHUNK: usize = 8;

/// Cap on the windows used to measure the loss before training.
const INITIAL_LOSS_SAMPLE: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub seed: u64,
    /// Chronological tail of each home's training windows held out for
    /// model selection.
    pub val_fraction: f64,
    pub positive_class_weight: f64,
    pub loss_reduction: Reduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 2,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            seed: 1,
            val_fraction: 0.1,
            positive_class_weight: 1.0,
            loss_reduction: Reduction::Mean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if !(0.0..0.5).contains(&self.val_fraction) {
            problems.push(format!("val_fraction must be in [0, 0.5), got {}", self.val_fraction));
        }
        if !(self.positive_class_weight >= 1.0 && self.positive_class_weight.is_finite()) {
            problems.push(format!(
                "positive_class_weight must be finite and >= 1, got {}",
                self.positive_class_weight
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                problems.push(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.eps_opt > 0.0) {
            problems.push(format!("eps_opt must be positive, got {}", self.eps_opt));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn adam(&self) -> Adam {
        Adam {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps_opt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

/// First and second moment estimates plus the number of steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(Tensor::zeros_like).collect();
        AdamState {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update; increments `state.t` first, so the
/// first call uses `t = 1`.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut AdamState,
    adam: &Adam,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim("adam_step", &[params.len()], &[grads.len()]));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::dim("adam_step", p.shape(), g.shape()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - adam.beta1.powi(t);
    let c2 = 1.0 - adam.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = adam.beta1 * *mv + (1.0 - adam.beta1) * gv;
            *vv = adam.beta2 * *vv + (1.0 - adam.beta2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= adam.learning_rate * m_hat / (v_hat.sqrt() + adam.eps);
        }
    }
    Ok(())
}

/// Binary cross-entropy of one probability, positive term weighted.
fn bce_term(p: f64, y: f64, pos_weight: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(pos_weight * y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn reduction_scale(reduction: Reduction, elements: usize) -> f64 {
    match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / elements as f64,
    }
}

/// Loss over `windows[indices]` with the configured weight and reduction.
pub fn batch_loss<N: Network>(
    model: &N,
    windows: &WindowSet,
    indices: &[usize],
    pos_weight: f64,
    reduction: Reduction,
) -> Result<f64> {
    let per_window: Vec<f64> = indices
        .par_iter()
        .map(|&i| {
            let probs = model.predict_proba(windows.input(i))?;
            Ok(probs
                .iter()
                .zip(windows.target(i))
                .map(|(&p, &y)| bce_term(p, y, pos_weight))
                .sum())
        })
        .collect::<Result<_>>()?;
    let total: f64 = per_window.iter().sum();
    Ok(total * reduction_scale(reduction, indices.len() * windows.horizon()))
}

/// Loss and parameter gradients over `windows[indices]`.
///
/// The gradient with respect to each logit uses the closed form
/// `w·y·(ŷ − 1) + (1 − y)·ŷ`, which is the derivative of the weighted loss
/// composed with the sigmoid and stays finite where the probability
/// saturates.
pub fn loss_and_grad<N: Network>(
    model: &N,
    windows: &WindowSet,
    indices: &[usize],
    pos_weight: f64,
    reduction: Reduction,
) -> Result<(f64, N)> {
    let scale = reduction_scale(reduction, indices.len() * windows.horizon());
    let partials: Vec<(f64, N)> = indices
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = model.zeroed();
            let mut loss = 0.0;
            for &i in chunk {
                let (logits, cache) = model.forward_cached(windows.input(i))?;
                let mut dlogits = Vec::with_capacity(logits.len());
                for (&z, &y) in logits.iter().zip(windows.target(i)) {
                    let p = sigmoid_scalar(z);
                    loss += bce_term(p, y, pos_weight);
                    dlogits.push(scale * (pos_weight * y * (p - 1.0) + (1.0 - y) * p));
                }
                model.backward(&cache, &dlogits, &mut grads)?;
            }
            Ok((loss, grads))
        })
        .collect::<Result<_>>()?;
    let mut parts = partials.into_iter();
    let (mut loss, mut grads) = parts.next().ok_or_else(|| Error::Empty("empty batch".into()))?;
    for (l, g) in parts {
        loss += l;
        grads.add_grads(&g)?;
    }
    Ok((loss * scale, grads))
}

/// Window-major probabilities for every window in the set.
pub fn predict_windows<N: Network>(model: &N, windows: &WindowSet) -> Result<Vec<f64>> {
    let per_window: Vec<Vec<f64>> = (0..windows.len())
        .into_par_iter()
        .map(|i| model.predict_proba(windows.input(i)))
        .collect::<Result<_>>()?;
    Ok(per_window.concat())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean per-element loss over each epoch's batches.
    pub train_loss: Vec<f64>,
    /// Mean per-element loss on the validation tail.
    pub val_loss: Vec<f64>,
    pub val_f1: Vec<f64>,
    /// Zero-based epoch whose parameters were returned, if any epoch ran.
    pub best_epoch: Option<usize>,
    /// Mean per-element loss on up to 2048 training windows before any
    /// update.
    pub initial_loss: Option<f64>,
    pub train_windows: usize,
    pub val_windows: usize,
}

/// Trains from `model`'s current parameters. Returns the parameters of the
/// epoch with the best validation F1 at 0.5 (earliest on ties), or of the
/// last epoch when there is no validation tail.
pub fn train<N: Network>(model: N, windows: &WindowSet, config: &TrainConfig) -> Result<(N, TrainHistory)> {
    config.validate()?;
    if windows.is_empty() {
        return Err(Error::Empty("no training windows".into()));
    }
    if (windows.history_len(), windows.horizon()) != (model.history_len(), model.horizon()) {
        return Err(Error::Config(format!(
            "model expects windows of {} → {} minutes, data has {} → {}",
            model.history_len(),
            model.horizon(),
            windows.history_len(),
            windows.horizon()
        )));
    }
    let (fit, val) = if config.val_fraction > 0.0 {
        windows.split_tail_per_home(config.val_fraction)
    } else {
        (windows.clone(), WindowSet::empty(windows.history_len(), windows.horizon()))
    };
    if fit.is_empty() {
        return Err(Error::Empty("no training windows left after the validation split".into()));
    }
    let mut history = TrainHistory {
        train_windows: fit.len(),
        val_windows: val.len(),
        ..TrainHistory::default()
    };
    if config.epochs == 0 {
        return Ok((model, history));
    }

    let weight = config.positive_class_weight;
    let sample_step = fit.len().div_ceil(INITIAL_LOSS_SAMPLE);
    let sample: Vec<usize> = (0..fit.len()).step_by(sample_step).collect();
    history.initial_loss = Some(batch_loss(&model, &fit, &sample, weight, Reduction::Mean)?);

    let adam = config.adam();
    let mut model = model;
    let mut state = AdamState::new(model.named_params().into_iter().map(|(_, t)| t));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let mut order: Vec<usize> = (0..fit.len()).collect();
    let mut best: Option<(f64, N)> = None;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let (loss, grads) = loss_and_grad(&model, &fit, batch, weight, config.loss_reduction)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    first_window: batch[0],
                });
            }
            epoch_loss += match config.loss_reduction {
                Reduction::Sum => loss,
                Reduction::Mean => loss * (batch.len() * fit.horizon()) as f64,
            };
            let grads: Vec<Tensor> = grads.named_params().into_iter().map(|(_, t)| t.clone()).collect();
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            adam_step(&mut model.params_mut(), &grad_refs, &mut state, &adam)?;
        }
        history.train_loss.push(epoch_loss / (fit.len() * fit.horizon()) as f64);

        if val.is_empty() {
            history.best_epoch = Some(epoch);
            best = Some((f64::NAN, model.clone()));
            continue;
        }
        let probs = predict_windows(&model, &val)?;
        let mut labels = Vec::with_capacity(probs.len());
        let mut loss = 0.0;
        for i in 0..val.len() {
            for (j, &y) in val.target(i).iter().enumerate() {
                loss += bce_term(probs[i * val.horizon() + j], y, weight);
                labels.push(y as u8);
            }
        }
        let val_f1 = f1(&confusion(&probs, &labels, 0.5));
        history.val_loss.push(loss / probs.len() as f64);
        history.val_f1.push(val_f1);
        if best.as_ref().is_none_or(|(f, _)| val_f1 > *f) {
            best = Some((val_f1, model.clone()));
            history.best_epoch = Some(epoch);
        }
    }
    let (_, chosen) = best.expect("at least one epoch ran");
    Ok((chosen, history))
}

/// Loss on a fixed batch as a function of every trainable tensor, for
/// gradient checks of the whole training objective.
pub struct ModelLossOp<'a, N: Network> {
    pub model: N,
    pub windows: &'a WindowSet,
    pub indices: Vec<usize>,
    pub pos_weight: f64,
    pub reduction: Reduction,
}

impl<N: Network> ModelLossOp<'_, N> {
    pub fn inputs(&self) -> Vec<Tensor> {
        self.model.named_params().into_iter().map(|(_, t)| t.clone()).collect()
    }

    fn with(&self, inputs: &[Tensor]) -> Result<N> {
        let mut m = self.model.clone();
        m.set_params(inputs)?;
        Ok(m)
    }
}

impl<N: Network> DiffOp for ModelLossOp<'_, N> {
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let m = self.with(inputs)?;
        Ok(Tensor::scalar(batch_loss(
            &m,
            self.windows,
            &self.indices,
            self.pos_weight,
            self.reduction,
        )?))
    }

    fn backward(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let m = self.with(inputs)?;
        let (_, g) = loss_and_grad(&m, self.windows, &self.indices, self.pos_weight, self.reduction)?;
        Ok(g.named_params()
            .into_iter()
            .map(|(_, t)| {
                let mut t = t.clone();
                t.scale(upstream.data()[0]);
                t
            })
            .collect())
    }
}
