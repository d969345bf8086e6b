//! [`DiffOp`] adapters so attention, the feed-forward block, the encoder and
//! whole networks can be run through the finite-difference checker.

use super::dctev::{attention_backward, attention_forward, ffn_backward, ffn_forward};
use super::{AttentionHead, DctEvParams, EncoderLayer, Network};
use crate::error::{Error, Result};
use crate::tensorkit::{sigmoid_scalar, DiffOp, Tensor};

fn placeholder() -> Tensor {
    Tensor::zeros(&[1])
}

fn bare_layer() -> EncoderLayer {
    EncoderLayer {
        heads: Vec::new(),
        w_o: placeholder(),
        ffn_w1: placeholder(),
        ffn_b1: placeholder(),
        ffn_w2: placeholder(),
        ffn_b2: placeholder(),
        ln1_gain: placeholder(),
        ln1_bias: placeholder(),
        ln2_gain: placeholder(),
        ln2_bias: placeholder(),
    }
}

/// Inputs: `x`, then `w_q, w_k, w_v` for each head, then `w_o`.
pub struct AttentionOp {
    pub n_heads: usize,
}

impl AttentionOp {
    pub fn inputs(x: &Tensor, layer: &EncoderLayer) -> Vec<Tensor> {
        let mut v = vec![x.clone()];
        for h in &layer.heads {
            v.extend([h.w_q.clone(), h.w_k.clone(), h.w_v.clone()]);
        }
        v.push(layer.w_o.clone());
        v
    }

    fn layer(&self, inputs: &[Tensor]) -> Result<EncoderLayer> {
        if inputs.len() != 2 + 3 * self.n_heads {
            return Err(Error::dim("attention_op", &[inputs.len()], &[2 + 3 * self.n_heads]));
        }
        let mut layer = bare_layer();
        layer.heads = inputs[1..1 + 3 * self.n_heads]
            .chunks(3)
            .map(|c| AttentionHead {
                w_q: c[0].clone(),
                w_k: c[1].clone(),
                w_v: c[2].clone(),
            })
            .collect();
        layer.w_o = inputs[inputs.len() - 1].clone();
        Ok(layer)
    }
}

impl DiffOp for AttentionOp {
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        Ok(attention_forward(&inputs[0], &self.layer(inputs)?)?.0)
    }

    fn backward(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let layer = self.layer(inputs)?;
        let (_, cache) = attention_forward(&inputs[0], &layer)?;
        let mut g = layer.clone();
        for h in &mut g.heads {
            h.w_q.fill(0.0);
            h.w_k.fill(0.0);
            h.w_v.fill(0.0);
        }
        g.w_o.fill(0.0);
        let dx = attention_backward(&inputs[0], &layer, &cache, upstream, &mut g)?;
        let mut out = vec![dx];
        for h in g.heads {
            out.extend([h.w_q, h.w_k, h.w_v]);
        }
        out.push(g.w_o);
        Ok(out)
    }
}

/// Inputs: `x`, `Φ₁`, `b₁`, `Φ₂`, `b₂`.
pub struct FeedForwardOp;

impl FeedForwardOp {
    pub fn inputs(x: &Tensor, layer: &EncoderLayer) -> Vec<Tensor> {
        vec![
            x.clone(),
            layer.ffn_w1.clone(),
            layer.ffn_b1.clone(),
            layer.ffn_w2.clone(),
            layer.ffn_b2.clone(),
        ]
    }

    fn layer(inputs: &[Tensor]) -> Result<EncoderLayer> {
        if inputs.len() != 5 {
            return Err(Error::dim("feed_forward_op", &[inputs.len()], &[5]));
        }
        let mut layer = bare_layer();
        layer.ffn_w1 = inputs[1].clone();
        layer.ffn_b1 = inputs[2].clone();
        layer.ffn_w2 = inputs[3].clone();
        layer.ffn_b2 = inputs[4].clone();
        Ok(layer)
    }
}

impl DiffOp for FeedForwardOp {
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        Ok(ffn_forward(&inputs[0], &Self::layer(inputs)?)?.0)
    }

    fn backward(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let layer = Self::layer(inputs)?;
        let (_, cache) = ffn_forward(&inputs[0], &layer)?;
        let mut g = layer.clone();
        for t in [&mut g.ffn_w1, &mut g.ffn_b1, &mut g.ffn_w2, &mut g.ffn_b2] {
            t.fill(0.0);
        }
        let dx = ffn_backward(&inputs[0], &layer, &cache, upstream, &mut g)?;
        Ok(vec![dx, g.ffn_w1, g.ffn_b1, g.ffn_w2, g.ffn_b2])
    }
}

fn with_params<N: Network>(model: &N, inputs: &[Tensor]) -> Result<N> {
    let mut m = model.clone();
    m.set_params(inputs)?;
    Ok(m)
}

/// Encoder output `Z` for a fixed window as a function of every trainable
/// tensor (in [`Network::named_params`] order).
pub struct EncodeOp {
    pub model: DctEvParams,
    pub x: Vec<f64>,
}

impl EncodeOp {
    pub fn new(model: DctEvParams, x: Vec<f64>) -> Self {
        EncodeOp { model, x }
    }

    pub fn inputs(&self) -> Vec<Tensor> {
        self.model.named_params().into_iter().map(|(_, t)| t.clone()).collect()
    }
}

impl DiffOp for EncodeOp {
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        with_params(&self.model, inputs)?.encode(&self.x)
    }

    fn backward(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let m = with_params(&self.model, inputs)?;
        let cache = m.encode_cached(&self.x)?;
        let mut g = m.zeroed();
        m.backward_from_z(&cache, upstream, &mut g)?;
        Ok(g.named_params().into_iter().map(|(_, t)| t.clone()).collect())
    }
}

/// Horizon probabilities `ŷ` for a fixed window as a function of every
/// trainable tensor.
pub struct PredictOp<N: Network> {
    pub model: N,
    pub x: Vec<f64>,
}

impl<N: Network> PredictOp<N> {
    pub fn new(model: N, x: Vec<f64>) -> Self {
        PredictOp { model, x }
    }

    pub fn inputs(&self) -> Vec<Tensor> {
        self.model.named_params().into_iter().map(|(_, t)| t.clone()).collect()
    }
}

impl<N: Network> DiffOp for PredictOp<N> {
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        Ok(Tensor::vector(with_params(&self.model, inputs)?.predict_proba(&self.x)?))
    }

    fn backward(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let m = with_params(&self.model, inputs)?;
        let (logits, cache) = m.forward_cached(&self.x)?;
        let dlogits: Vec<f64> = logits
            .iter()
            .zip(upstream.data())
            .map(|(&z, &dy)| {
                let y = sigmoid_scalar(z);
                dy * y * (1.0 - y)
            })
            .collect();
        let mut g = m.zeroed();
        m.backward(&cache, &dlogits, &mut g)?;
        Ok(g.named_params().into_iter().map(|(_, t)| t.clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensorkit::{grad_check, GradCheckReport};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro() -> ModelConfig {
        ModelConfig {
            history_len: 12,
            patch_len: 4,
            patch_stride: 4,
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            n_layers: 1,
            horizon: 3,
            head_bias: true,
        }
    }

    fn assert_pass(r: GradCheckReport) {
        assert!(r.pass && r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn attention_gradcheck_three_patches() {
        let config = ModelConfig {
            d_model: 4,
            ..micro()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = DctEvParams::init(&config, &mut rng).unwrap();
        let x = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let op = AttentionOp { n_heads: 2 };
        assert_pass(grad_check(&op, &AttentionOp::inputs(&x, &m.layers[0]), 1e-5, 1e-4));
    }

    #[test]
    fn feed_forward_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let m = DctEvParams::init(&micro(), &mut rng).unwrap();
        let mut layer = m.layers[0].clone();
        layer.ffn_b1 = Tensor::uniform(&[16], 0.5, &mut rng);
        let x = Tensor::uniform(&[3, 8], 1.0, &mut rng);
        assert_pass(grad_check(&FeedForwardOp, &FeedForwardOp::inputs(&x, &layer), 1e-5, 1e-4));
    }

    #[test]
    fn encode_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let m = DctEvParams::init(&micro(), &mut rng).unwrap();
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.9).cos()).collect();
        let op = EncodeOp::new(m, x);
        assert_pass(grad_check(&op, &op.inputs(), 1e-5, 1e-4));
    }

    #[test]
    fn full_model_gradcheck() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(30 + seed);
            let mut m = DctEvParams::init(&micro(), &mut rng).unwrap();
            m.head_b = Tensor::uniform(&[3], 0.3, &mut rng);
            let x: Vec<f64> = (0..12).map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0)).collect();
            let op = PredictOp::new(m, x);
            assert_pass(grad_check(&op, &op.inputs(), 1e-5, 1e-4));
        }
    }

    #[test]
    fn every_parameter_gets_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let m = DctEvParams::init(&micro(), &mut rng).unwrap();
        let mut g = m.zeroed();
        for _ in 0..8 {
            let x: Vec<f64> = (0..12).map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0)).collect();
            let (_, cache) = m.forward_cached(&x).unwrap();
            m.backward(&cache, &[0.3, -0.2, 0.5], &mut g).unwrap();
        }
        for (name, t) in g.named_params() {
            assert!(t.data().iter().any(|v| *v != 0.0), "{name} has zero gradient");
        }
    }
}
