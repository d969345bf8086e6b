//! The patch-based transformer and the dense baseline.
//!
//! Both networks map a length-`history_len` load window to `horizon` logits,
//! one per future minute. Gradients are computed by explicit backward
//! passes built from the `tensorkit` kernels; there is no tape.

mod cost;
mod dctev;
mod diffops;
mod mlp;

pub use cost::{attention_cost_report, AttentionCostReport};
pub use dctev::{
    add_positional, embed, feed_forward, multi_head_attention, AttentionHead, DctEvCache,
    DctEvParams, EncoderLayer,
};
pub use diffops::{AttentionOp, EncodeOp, FeedForwardOp, PredictOp};
pub use mlp::{MlpCache, MlpConfig, MlpParams};

use crate::error::{Error, Result};
use crate::tensorkit::{sigmoid_scalar, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input window length `T` in minutes.
    pub history_len: usize,
    /// Patch (sub-sequence) length `L`.
    pub patch_len: usize,
    pub patch_stride: usize,
    /// Embedding width `D`.
    pub d_model: usize,
    pub n_heads: usize,
    /// Hidden width of the position-wise feed-forward block.
    pub d_ffn: usize,
    pub n_layers: usize,
    /// Number of future minutes `M` predicted.
    pub horizon: usize,
    /// Learned bias on each horizon logit.
    pub head_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            history_len: 180,
            patch_len: 20,
            patch_stride: 10,
            d_model: 64,
            n_heads: 4,
            d_ffn: 128,
            n_layers: 2,
            horizon: 10,
            head_bias: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("history_len", self.history_len),
            ("patch_len", self.patch_len),
            ("patch_stride", self.patch_stride),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("n_layers", self.n_layers),
            ("horizon", self.horizon),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        let n = patch_count(self.history_len, self.patch_len, self.patch_stride)?;
        if n < 2 {
            return Err(Error::Config(format!(
                "history_len {} with patch_len {} gives {n} patch; at least 2 are needed",
                self.history_len, self.patch_len
            )));
        }
        if self.d_model < 2 {
            return Err(Error::Config("d_model must be at least 2".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.history_len - self.patch_len) / self.patch_stride + 1
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// `N = (T − L) / stride + 1`, requiring the stride to tile `T − L` exactly.
pub fn patch_count(history_len: usize, patch_len: usize, stride: usize) -> Result<usize> {
    if patch_len == 0 || stride == 0 || patch_len > history_len {
        return Err(Error::Config(format!(
            "need 1 <= patch_len <= history_len and stride >= 1 (T={history_len}, L={patch_len}, stride={stride})"
        )));
    }
    if !(history_len - patch_len).is_multiple_of(stride) {
        return Err(Error::Config(format!(
            "history_len - patch_len = {} is not divisible by patch_stride {stride}",
            history_len - patch_len
        )));
    }
    Ok((history_len - patch_len) / stride + 1)
}

/// Overlapping patches of `x` as rows: row `n` is `x[n·stride .. n·stride + L]`.
pub fn patchify(x: &[f64], patch_len: usize, stride: usize) -> Result<Tensor> {
    let n = patch_count(x.len(), patch_len, stride)?;
    let mut data = Vec::with_capacity(n * patch_len);
    for p in 0..n {
        data.extend_from_slice(&x[p * stride..p * stride + patch_len]);
    }
    Tensor::matrix(n, patch_len, data)
}

/// Fixed sinusoidal table: `pe[n, 2i] = sin(n / 10000^(2i/D))`,
/// `pe[n, 2i+1] = cos(n / 10000^(2i/D))`.
pub fn positional_encoding(n_positions: usize, d_model: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n_positions, d_model]);
    for pos in 0..n_positions {
        let row = t.row_mut(pos);
        for i in (0..d_model).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d_model as f64);
            row[i] = angle.sin();
            if i + 1 < d_model {
                row[i + 1] = angle.cos();
            }
        }
    }
    t
}

/// A trainable window → horizon-logits network.
pub trait Network: Clone + Send + Sync {
    type Cache: Send;

    fn history_len(&self) -> usize;
    fn horizon(&self) -> usize;

    /// Logits plus whatever the backward pass needs.
    fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, Self::Cache)>;

    /// Adds this window's parameter gradients into `grads` given
    /// `∂loss/∂logits`.
    fn backward(&self, cache: &Self::Cache, dlogits: &[f64], grads: &mut Self) -> Result<()>;

    /// Trainable tensors with stable names, in a fixed order.
    fn named_params(&self) -> Vec<(String, &Tensor)>;

    /// Same order as [`Network::named_params`].
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.logits(x)?.into_iter().map(sigmoid_scalar).collect())
    }

    /// Same shapes, all trainable values zero.
    fn zeroed(&self) -> Self {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.fill(0.0);
        }
        z
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Overwrites trainable tensors in [`Network::named_params`] order.
    fn set_params(&mut self, values: &[Tensor]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != values.len() {
            return Err(Error::dim("set_params", &[params.len()], &[values.len()]));
        }
        for (p, v) in params.iter_mut().zip(values) {
            if p.shape() != v.shape() {
                return Err(Error::dim("set_params", p.shape(), v.shape()));
            }
            p.data_mut().copy_from_slice(v.data());
        }
        Ok(())
    }

    fn add_grads(&mut self, other: &Self) -> Result<()> {
        let theirs: Vec<Tensor> = other.named_params().into_iter().map(|(_, t)| t.clone()).collect();
        for (mine, t) in self.params_mut().into_iter().zip(&theirs) {
            mine.add_assign(t)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Dctev,
    Mlp,
}

/// Either network, for code that picks one at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    DctEv(DctEvParams),
    Mlp(MlpParams),
}

pub enum ModelCache {
    DctEv(DctEvCache),
    Mlp(MlpCache),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::DctEv(_) => ModelKind::Dctev,
            Model::Mlp(_) => ModelKind::Mlp,
        }
    }
}

impl Network for Model {
    type Cache = ModelCache;

    fn history_len(&self) -> usize {
        match self {
            Model::DctEv(m) => m.history_len(),
            Model::Mlp(m) => m.history_len(),
        }
    }

    fn horizon(&self) -> usize {
        match self {
            Model::DctEv(m) => m.horizon(),
            Model::Mlp(m) => m.horizon(),
        }
    }

    fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, ModelCache)> {
        Ok(match self {
            Model::DctEv(m) => {
                let (y, c) = m.forward_cached(x)?;
                (y, ModelCache::DctEv(c))
            }
            Model::Mlp(m) => {
                let (y, c) = m.forward_cached(x)?;
                (y, ModelCache::Mlp(c))
            }
        })
    }

    fn backward(&self, cache: &ModelCache, dlogits: &[f64], grads: &mut Self) -> Result<()> {
        match (self, cache, grads) {
            (Model::DctEv(m), ModelCache::DctEv(c), Model::DctEv(g)) => m.backward(c, dlogits, g),
            (Model::Mlp(m), ModelCache::Mlp(c), Model::Mlp(g)) => m.backward(c, dlogits, g),
            _ => Err(Error::Config("model, cache and gradient kinds differ".into())),
        }
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        match self {
            Model::DctEv(m) => m.named_params(),
            Model::Mlp(m) => m.named_params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Model::DctEv(m) => m.params_mut(),
            Model::Mlp(m) => m.params_mut(),
        }
    }
}
