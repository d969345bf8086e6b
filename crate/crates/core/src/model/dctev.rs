use super::{patchify, positional_encoding, ModelConfig, Network};
use crate::error::{Error, Result};
use crate::tensorkit::{
    add_row_bias, column_sums, concat_cols, layer_norm, layer_norm_backward, matmul, matmul_at,
    matmul_bt, relu, relu_backward, softmax_rows, softmax_rows_backward, split_cols,
    LayerNormCache, Tensor, LAYER_NORM_EPS,
};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    /// `D × D_m` query projection.
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

/// One post-norm encoder block:
/// `h1 = LN(x + MHA(x))`, `out = LN(h1 + FFN(h1))`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub heads: Vec<AttentionHead>,
    /// `D × D` projection applied to the concatenated heads.
    pub w_o: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

impl EncoderLayer {
    fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let (d, dm, df) = (config.d_model, config.head_dim(), config.d_ffn);
        let heads = (0..config.n_heads)
            .map(|_| AttentionHead {
                w_q: Tensor::xavier(d, dm, rng),
                w_k: Tensor::xavier(d, dm, rng),
                w_v: Tensor::xavier(d, dm, rng),
            })
            .collect();
        EncoderLayer {
            heads,
            w_o: Tensor::xavier(d, d, rng),
            ffn_w1: Tensor::xavier(d, df, rng),
            ffn_b1: Tensor::zeros(&[df]),
            ffn_w2: Tensor::xavier(df, d, rng),
            ffn_b2: Tensor::zeros(&[d]),
            ln1_gain: Tensor::full(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            ln2_gain: Tensor::full(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (h, head) in self.heads.iter().enumerate() {
            out.push((format!("{prefix}.head{h}.w_q"), &head.w_q));
            out.push((format!("{prefix}.head{h}.w_k"), &head.w_k));
            out.push((format!("{prefix}.head{h}.w_v"), &head.w_v));
        }
        out.push((format!("{prefix}.w_o"), &self.w_o));
        out.push((format!("{prefix}.ffn.w1"), &self.ffn_w1));
        out.push((format!("{prefix}.ffn.b1"), &self.ffn_b1));
        out.push((format!("{prefix}.ffn.w2"), &self.ffn_w2));
        out.push((format!("{prefix}.ffn.b2"), &self.ffn_b2));
        out.push((format!("{prefix}.ln1.gain"), &self.ln1_gain));
        out.push((format!("{prefix}.ln1.bias"), &self.ln1_bias));
        out.push((format!("{prefix}.ln2.gain"), &self.ln2_gain));
        out.push((format!("{prefix}.ln2.bias"), &self.ln2_bias));
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for head in &mut self.heads {
            out.push(&mut head.w_q);
            out.push(&mut head.w_k);
            out.push(&mut head.w_v);
        }
        out.extend([
            &mut self.w_o,
            &mut self.ffn_w1,
            &mut self.ffn_b1,
            &mut self.ffn_w2,
            &mut self.ffn_b2,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DctEvParams {
    pub config: ModelConfig,
    /// `L × D` patch projection.
    pub kappa: Tensor,
    /// Fixed `N × D` sinusoidal table; never trained.
    pub positional: Tensor,
    pub layers: Vec<EncoderLayer>,
    /// `(N·D) × M` prediction head.
    pub head_w: Tensor,
    /// Length-`M` head bias, trained only when `config.head_bias` is set.
    pub head_b: Tensor,
}

impl DctEvParams {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let n = config.n_patches();
        let kappa = Tensor::xavier(config.patch_len, config.d_model, rng);
        let layers = (0..config.n_layers)
            .map(|_| EncoderLayer::init(config, rng))
            .collect();
        let head_w = Tensor::xavier(n * config.d_model, config.horizon, rng);
        Ok(DctEvParams {
            config: config.clone(),
            kappa,
            positional: positional_encoding(n, config.d_model),
            layers,
            head_w,
            head_b: Tensor::zeros(&[config.horizon]),
        })
    }

    /// Encoder output `Z` (`N × D`) for one window.
    pub fn encode(&self, x: &[f64]) -> Result<Tensor> {
        Ok(self.encode_cached(x)?.z)
    }

    /// Attention probability matrices, indexed `[layer][head]`.
    pub fn attention_maps(&self, x: &[f64]) -> Result<Vec<Vec<Tensor>>> {
        let cache = self.encode_cached(x)?;
        Ok(cache
            .layers
            .into_iter()
            .map(|l| l.attn.heads.into_iter().map(|h| h.attn).collect())
            .collect())
    }

    pub fn encode_cached(&self, x: &[f64]) -> Result<DctEvCache> {
        let c = &self.config;
        if x.len() != c.history_len {
            return Err(Error::dim("encode", &[x.len()], &[c.history_len]));
        }
        let patches = patchify(x, c.patch_len, c.patch_stride)?;
        let mut h = add_positional(&embed(&patches, &self.kappa)?, &self.positional)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, cache) = layer_forward(&h, layer)?;
            layers.push(cache);
            h = out;
        }
        Ok(DctEvCache {
            patches,
            layers,
            z: h,
        })
    }

    /// Accumulates parameter gradients for an upstream `∂/∂Z`.
    pub fn backward_from_z(&self, cache: &DctEvCache, dz: &Tensor, grads: &mut Self) -> Result<()> {
        let mut dh = dz.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            dh = layer_backward(layer, &cache.layers[l], &dh, &mut grads.layers[l])?;
        }
        // positional table is constant, so dχ = dh
        grads.kappa.add_assign(&matmul_at(&cache.patches, &dh)?)
    }
}

/// Patch embedding `χ = patches · κ`.
pub fn embed(patches: &Tensor, kappa: &Tensor) -> Result<Tensor> {
    matmul(patches, kappa)
}

pub fn add_positional(chi: &Tensor, positional: &Tensor) -> Result<Tensor> {
    if chi.shape() != positional.shape() {
        return Err(Error::dim("add_positional", chi.shape(), positional.shape()));
    }
    crate::tensorkit::add(chi, positional)
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Row-stochastic `N × N` attention weights.
    pub attn: Tensor,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub heads: Vec<HeadCache>,
    pub concat: Tensor,
}

pub(crate) fn attention_forward(x: &Tensor, layer: &EncoderLayer) -> Result<(Tensor, AttentionCache)> {
    let mut heads = Vec::with_capacity(layer.heads.len());
    let mut outputs = Vec::with_capacity(layer.heads.len());
    for head in &layer.heads {
        let q = matmul(x, &head.w_q)?;
        let k = matmul(x, &head.w_k)?;
        let v = matmul(x, &head.w_v)?;
        let mut scores = matmul_bt(&q, &k)?;
        scores.scale(1.0 / (q.cols() as f64).sqrt());
        let attn = softmax_rows(&scores);
        outputs.push(matmul(&attn, &v)?);
        heads.push(HeadCache { q, k, v, attn });
    }
    let concat = concat_cols(&outputs)?;
    let out = matmul(&concat, &layer.w_o)?;
    Ok((out, AttentionCache { heads, concat }))
}

/// Returns `∂/∂x` and accumulates weight gradients into `g`.
pub(crate) fn attention_backward(
    x: &Tensor,
    layer: &EncoderLayer,
    cache: &AttentionCache,
    dout: &Tensor,
    g: &mut EncoderLayer,
) -> Result<Tensor> {
    g.w_o.add_assign(&matmul_at(&cache.concat, dout)?)?;
    let dconcat = matmul_bt(dout, &layer.w_o)?;
    let dheads = split_cols(&dconcat, layer.heads.len())?;
    let mut dx = x.zeros_like();
    for ((head, hc), (dhead, gh)) in layer
        .heads
        .iter()
        .zip(&cache.heads)
        .zip(dheads.iter().zip(g.heads.iter_mut()))
    {
        let scale = 1.0 / (hc.q.cols() as f64).sqrt();
        let dattn = matmul_bt(dhead, &hc.v)?;
        let dv = matmul_at(&hc.attn, dhead)?;
        let mut dscores = softmax_rows_backward(&hc.attn, &dattn)?;
        dscores.scale(scale);
        let dq = matmul(&dscores, &hc.k)?;
        let dk = matmul_at(&dscores, &hc.q)?;
        for (d, w, gw) in [
            (&dq, &head.w_q, &mut gh.w_q),
            (&dk, &head.w_k, &mut gh.w_k),
            (&dv, &head.w_v, &mut gh.w_v),
        ] {
            gw.add_assign(&matmul_at(x, d)?)?;
            dx.add_assign(&matmul_bt(d, w)?)?;
        }
    }
    Ok(dx)
}

/// Multi-head self-attention for one layer's weights.
pub fn multi_head_attention(x: &Tensor, layer: &EncoderLayer) -> Result<Tensor> {
    Ok(attention_forward(x, layer)?.0)
}

#[derive(Debug, Clone)]
pub struct FfnCache {
    pub pre: Tensor,
    pub hidden: Tensor,
}

pub(crate) fn ffn_forward(x: &Tensor, layer: &EncoderLayer) -> Result<(Tensor, FfnCache)> {
    let pre = add_row_bias(&matmul(x, &layer.ffn_w1)?, &layer.ffn_b1)?;
    let hidden = relu(&pre);
    let out = add_row_bias(&matmul(&hidden, &layer.ffn_w2)?, &layer.ffn_b2)?;
    Ok((out, FfnCache { pre, hidden }))
}

pub(crate) fn ffn_backward(
    x: &Tensor,
    layer: &EncoderLayer,
    cache: &FfnCache,
    dout: &Tensor,
    g: &mut EncoderLayer,
) -> Result<Tensor> {
    g.ffn_b2.add_assign(&column_sums(dout))?;
    g.ffn_w2.add_assign(&matmul_at(&cache.hidden, dout)?)?;
    let dhidden = matmul_bt(dout, &layer.ffn_w2)?;
    let dpre = relu_backward(&cache.pre, &dhidden)?;
    g.ffn_b1.add_assign(&column_sums(&dpre))?;
    g.ffn_w1.add_assign(&matmul_at(x, &dpre)?)?;
    matmul_bt(&dpre, &layer.ffn_w1)
}

/// Position-wise `ReLU(x·Φ₁ + b₁)·Φ₂ + b₂`.
pub fn feed_forward(x: &Tensor, layer: &EncoderLayer) -> Result<Tensor> {
    Ok(ffn_forward(x, layer)?.0)
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    input: Tensor,
    attn: AttentionCache,
    ln1: LayerNormCache,
    mid: Tensor,
    ffn: FfnCache,
    ln2: LayerNormCache,
}

fn layer_forward(x: &Tensor, layer: &EncoderLayer) -> Result<(Tensor, LayerCache)> {
    let (a, attn) = attention_forward(x, layer)?;
    let mut r1 = a;
    r1.add_assign(x)?;
    let (mid, ln1) = layer_norm(&r1, &layer.ln1_gain, &layer.ln1_bias, LAYER_NORM_EPS)?;
    let (f, ffn) = ffn_forward(&mid, layer)?;
    let mut r2 = f;
    r2.add_assign(&mid)?;
    let (out, ln2) = layer_norm(&r2, &layer.ln2_gain, &layer.ln2_bias, LAYER_NORM_EPS)?;
    Ok((
        out,
        LayerCache {
            input: x.clone(),
            attn,
            ln1,
            mid,
            ffn,
            ln2,
        },
    ))
}

fn layer_backward(
    layer: &EncoderLayer,
    cache: &LayerCache,
    dout: &Tensor,
    g: &mut EncoderLayer,
) -> Result<Tensor> {
    let (dr2, dg2, db2) = layer_norm_backward(&cache.ln2, &layer.ln2_gain, dout)?;
    g.ln2_gain.add_assign(&dg2)?;
    g.ln2_bias.add_assign(&db2)?;
    let mut dmid = ffn_backward(&cache.mid, layer, &cache.ffn, &dr2, g)?;
    dmid.add_assign(&dr2)?;
    let (dr1, dg1, db1) = layer_norm_backward(&cache.ln1, &layer.ln1_gain, &dmid)?;
    g.ln1_gain.add_assign(&dg1)?;
    g.ln1_bias.add_assign(&db1)?;
    let mut dx = attention_backward(&cache.input, layer, &cache.attn, &dr1, g)?;
    dx.add_assign(&dr1)?;
    Ok(dx)
}

pub struct DctEvCache {
    pub patches: Tensor,
    layers: Vec<LayerCache>,
    pub z: Tensor,
}

impl Network for DctEvParams {
    type Cache = DctEvCache;

    fn history_len(&self) -> usize {
        self.config.history_len
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, DctEvCache)> {
        let cache = self.encode_cached(x)?;
        // flatten Z row-major into a 1 × (N·D) row
        let flat = Tensor::matrix(1, cache.z.len(), cache.z.data().to_vec())?;
        let mut logits = matmul(&flat, &self.head_w)?.into_data();
        if self.config.head_bias {
            for (l, b) in logits.iter_mut().zip(self.head_b.data()) {
                *l += b;
            }
        }
        Ok((logits, cache))
    }

    fn backward(&self, cache: &DctEvCache, dlogits: &[f64], grads: &mut Self) -> Result<()> {
        let m = self.config.horizon;
        if dlogits.len() != m {
            return Err(Error::dim("backward", &[dlogits.len()], &[m]));
        }
        let dl = Tensor::matrix(1, m, dlogits.to_vec())?;
        let flat = Tensor::matrix(1, cache.z.len(), cache.z.data().to_vec())?;
        grads.head_w.add_assign(&matmul_at(&flat, &dl)?)?;
        if self.config.head_bias {
            for (g, d) in grads.head_b.data_mut().iter_mut().zip(dlogits) {
                *g += d;
            }
        }
        let dz = matmul_bt(&dl, &self.head_w)?.reshape(cache.z.shape().to_vec())?;
        self.backward_from_z(cache, &dz, grads)
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("kappa".to_string(), &self.kappa)];
        for (l, layer) in self.layers.iter().enumerate() {
            layer.named(&format!("layer{l}"), &mut out);
        }
        out.push(("head.w".into(), &self.head_w));
        if self.config.head_bias {
            out.push(("head.b".into(), &self.head_b));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.kappa];
        for layer in &mut self.layers {
            layer.tensors_mut(&mut out);
        }
        out.push(&mut self.head_w);
        if self.config.head_bias {
            out.push(&mut self.head_b);
        }
        out
    }
}
