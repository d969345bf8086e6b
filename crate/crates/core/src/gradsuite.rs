//! The finite-difference suite run by the `gradcheck` command: every
//! tensor kernel on three shapes, the model blocks on a micro config, and
//! the configured model itself.

use crate::checkpoint::init_model;
use crate::config::RunConfig;
use crate::error::Result;
use crate::model::{
    AttentionOp, DctEvParams, EncodeOp, FeedForwardOp, Model, ModelConfig, PredictOp,
};
use crate::tensorkit::{
    grad_check_sampled, AddRowBiasOp, BceLossOp, DiffOp, GradCheckReport, LayerNormOp, MatMulOp,
    Reduction, ReluOp, SigmoidOp, SoftmaxRowsOp, Tensor, LAYER_NORM_EPS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub pass: bool,
    pub coords_checked: usize,
}

/// The micro configuration used for block and whole-model checks.
pub fn micro_config() -> ModelConfig {
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

const SHAPES: [(usize, usize); 3] = [(2, 3), (4, 5), (7, 3)];

struct Runner {
    eps: f64,
    tol: f64,
    entries: Vec<GradCheckEntry>,
}

impl Runner {
    fn check(&mut self, name: String, op: &dyn DiffOp, inputs: &[Tensor], max_coords: Option<usize>) {
        let GradCheckReport {
            max_rel_error,
            pass,
            coords_checked,
        } = grad_check_sampled(op, inputs, self.eps, self.tol, max_coords);
        self.entries.push(GradCheckEntry {
            name,
            max_rel_error,
            pass,
            coords_checked,
        });
    }
}

fn probabilities(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(0.05..0.95);
    }
    t
}

fn labels(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = f64::from(rng.random_range(0..2u8));
    }
    t
}

pub fn gradcheck_suite(config: &RunConfig) -> Result<Vec<GradCheckEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(3);
    let mut r = Runner {
        eps: config.gradcheck_eps,
        tol: config.gradcheck_tol,
        entries: Vec::new(),
    };

    for (m, n) in SHAPES {
        let k = n + 1;
        let a = Tensor::uniform(&[m, k], 1.0, &mut rng);
        let b = Tensor::uniform(&[k, n], 1.0, &mut rng);
        r.check(format!("matmul {m}x{k}·{k}x{n}"), &MatMulOp, &[a, b], None);
        let x = Tensor::uniform(&[m, n], 2.0, &mut rng);
        r.check(format!("softmax_rows {m}x{n}"), &SoftmaxRowsOp, std::slice::from_ref(&x), None);
        r.check(format!("relu {m}x{n}"), &ReluOp, std::slice::from_ref(&x), None);
        r.check(format!("sigmoid {m}x{n}"), &SigmoidOp, std::slice::from_ref(&x), None);
        let gain = Tensor::uniform(&[n], 1.0, &mut rng);
        let bias = Tensor::uniform(&[n], 1.0, &mut rng);
        r.check(
            format!("layer_norm {m}x{n}"),
            &LayerNormOp { eps: LAYER_NORM_EPS },
            &[x.clone(), gain, bias.clone()],
            None,
        );
        r.check(format!("add_row_bias {m}x{n}"), &AddRowBiasOp, &[x, bias], None);
        for (weight, reduction) in [(1.0, Reduction::Sum), (2.5, Reduction::Mean)] {
            let op = BceLossOp {
                labels: labels(&[m, n], &mut rng),
                pos_weight: weight,
                reduction,
            };
            let name = format!("bce_loss {m}x{n} w={weight} {reduction:?}").to_lowercase();
            r.check(name, &op, &[probabilities(&[m, n], &mut rng)], None);
        }
    }

    let micro = DctEvParams::init(&micro_config(), &mut rng)?;
    let x = Tensor::uniform(&[3, 8], 1.0, &mut rng);
    let op = AttentionOp { n_heads: 2 };
    r.check("attention micro".into(), &op, &AttentionOp::inputs(&x, &micro.layers[0]), None);
    r.check(
        "feed_forward micro".into(),
        &FeedForwardOp,
        &FeedForwardOp::inputs(&x, &micro.layers[0]),
        None,
    );
    let window: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
    let op = EncodeOp::new(micro.clone(), window.clone());
    r.check("encode micro".into(), &op, &op.inputs(), None);
    let op = PredictOp::new(micro, window);
    r.check("full model micro".into(), &op, &op.inputs(), None);

    let model: Model = init_model(config)?;
    let window: Vec<f64> = (0..config.history_len)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let op = PredictOp::new(model, window);
    let max = (config.gradcheck_max_coords > 0).then_some(config.gradcheck_max_coords);
    r.check("full model configured".into(), &op, &op.inputs(), max);
    Ok(r.entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_small_config() {
        let config = RunConfig {
            history_len: 40,
            patch_len: 10,
            patch_stride: 10,
            d_model: 8,
            n_heads: 2,
            d_ffn: 8,
            n_layers: 2,
            horizon: 4,
            gradcheck_max_coords: 150,
            ..RunConfig::default()
        };
        let entries = gradcheck_suite(&config).unwrap();
        assert!(entries.len() >= 3 * 8 + 5);
        for e in &entries {
            assert!(e.pass, "{e:?}");
        }
    }
}
