use super::dctev::attention_forward;
use super::{patch_count, EncoderLayer};
use crate::error::{Error, Result};
use crate::tensorkit::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionCostReport {
    pub history_len: usize,
    pub patch_len: usize,
    pub patch_stride: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub tokens_unpatched: usize,
    pub tokens_patched: usize,
    /// `(T / N)²`, the ratio of attention-score work.
    pub flops_ratio: f64,
    /// Median wall time of one attention pass over `T` tokens.
    pub measured_ms_unpatched: f64,
    pub measured_ms_patched: f64,
    pub repeats: usize,
}

fn random_layer(d_model: usize, n_heads: usize, rng: &mut ChaCha8Rng) -> Result<EncoderLayer> {
    let config = super::ModelConfig {
        d_model,
        n_heads,
        history_len: 2,
        patch_len: 1,
        patch_stride: 1,
        d_ffn: 1,
        n_layers: 1,
        horizon: 1,
        head_bias: false,
    };
    let mut params = super::DctEvParams::init(&config, rng)?;
    Ok(params.layers.remove(0))
}

fn median_ms(layer: &EncoderLayer, x: &Tensor, repeats: usize) -> Result<f64> {
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let out = attention_forward(x, layer)?;
        std::hint::black_box(&out);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Analytic and measured cost of one self-attention pass over raw minutes
/// versus patches, with the same width and head count.
pub fn attention_cost_report(
    history_len: usize,
    patch_len: usize,
    patch_stride: usize,
    d_model: usize,
    n_heads: usize,
    repeats: usize,
) -> Result<AttentionCostReport> {
    let n = patch_count(history_len, patch_len, patch_stride)?;
    if d_model == 0 || n_heads == 0 || !d_model.is_multiple_of(n_heads) {
        return Err(Error::Config(format!(
            "d_model {d_model} must be a positive multiple of n_heads {n_heads}"
        )));
    }
    let repeats = repeats.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let layer = random_layer(d_model, n_heads, &mut rng)?;
    let full = Tensor::uniform(&[history_len, d_model], 1.0, &mut rng);
    let patched = Tensor::uniform(&[n, d_model], 1.0, &mut rng);
    // warm up caches before timing
    median_ms(&layer, &full, 1)?;
    median_ms(&layer, &patched, 1)?;
    Ok(AttentionCostReport {
        history_len,
        patch_len,
        patch_stride,
        d_model,
        n_heads,
        tokens_unpatched: history_len,
        tokens_patched: n,
        flops_ratio: (history_len as f64 / n as f64).powi(2),
        measured_ms_unpatched: median_ms(&layer, &full, repeats)?,
        measured_ms_patched: median_ms(&layer, &patched, repeats)?,
        repeats,
    })
}
