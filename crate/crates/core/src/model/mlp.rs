use super::Network;
use crate::error::{Error, Result};
use crate::tensorkit::{
    add_row_bias, column_sums, matmul, matmul_at, matmul_bt, relu, relu_backward, Tensor,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Dense baseline `T → hidden → hidden → M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub history_len: usize,
    pub hidden: usize,
    pub horizon: usize,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history_len == 0 || self.hidden == 0 || self.horizon == 0 {
            return Err(Error::Config(
                "baseline history_len, hidden and horizon must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub config: MlpConfig,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

pub struct MlpCache {
    x: Tensor,
    pre1: Tensor,
    h1: Tensor,
    pre2: Tensor,
    h2: Tensor,
}

impl MlpParams {
    pub fn init<R: Rng + ?Sized>(config: &MlpConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (t, h, m) = (config.history_len, config.hidden, config.horizon);
        Ok(MlpParams {
            config: config.clone(),
            w1: Tensor::xavier(t, h, rng),
            b1: Tensor::zeros(&[h]),
            w2: Tensor::xavier(h, h, rng),
            b2: Tensor::zeros(&[h]),
            w3: Tensor::xavier(h, m, rng),
            b3: Tensor::zeros(&[m]),
        })
    }
}

impl Network for MlpParams {
    type Cache = MlpCache;

    fn history_len(&self) -> usize {
        self.config.history_len
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        if x.len() != self.config.history_len {
            return Err(Error::dim("mlp_forward", &[x.len()], &[self.config.history_len]));
        }
        let x = Tensor::matrix(1, x.len(), x.to_vec())?;
        let pre1 = add_row_bias(&matmul(&x, &self.w1)?, &self.b1)?;
        let h1 = relu(&pre1);
        let pre2 = add_row_bias(&matmul(&h1, &self.w2)?, &self.b2)?;
        let h2 = relu(&pre2);
        let logits = add_row_bias(&matmul(&h2, &self.w3)?, &self.b3)?.into_data();
        Ok((
            logits,
            MlpCache {
                x,
                pre1,
                h1,
                pre2,
                h2,
            },
        ))
    }

    fn backward(&self, cache: &MlpCache, dlogits: &[f64], grads: &mut Self) -> Result<()> {
        let m = self.config.horizon;
        if dlogits.len() != m {
            return Err(Error::dim("mlp_backward", &[dlogits.len()], &[m]));
        }
        let d3 = Tensor::matrix(1, m, dlogits.to_vec())?;
        grads.w3.add_assign(&matmul_at(&cache.h2, &d3)?)?;
        grads.b3.add_assign(&column_sums(&d3))?;
        let d2 = relu_backward(&cache.pre2, &matmul_bt(&d3, &self.w3)?)?;
        grads.w2.add_assign(&matmul_at(&cache.h1, &d2)?)?;
        grads.b2.add_assign(&column_sums(&d2))?;
        let d1 = relu_backward(&cache.pre1, &matmul_bt(&d2, &self.w2)?)?;
        grads.w1.add_assign(&matmul_at(&cache.x, &d1)?)?;
        grads.b1.add_assign(&column_sums(&d1))?;
        Ok(())
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("w1".into(), &self.w1),
            ("b1".into(), &self.b1),
            ("w2".into(), &self.w2),
            ("b2".into(), &self.b2),
            ("w3".into(), &self.w3),
            ("b3".into(), &self.b3),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PredictOp;
    use crate::tensorkit::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> MlpParams {
        let config = MlpConfig {
            history_len: 8,
            hidden: 4,
            horizon: 2,
        };
        MlpParams::init(&config, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn zero_weights_give_half() {
        let m = small().zeroed();
        assert_eq!(m.predict_proba(&[1.0; 8]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn output_length() {
        let m = small();
        assert_eq!(m.predict_proba(&[0.3; 8]).unwrap().len(), 2);
        assert!(m.predict_proba(&[0.3; 7]).is_err());
    }

    #[test]
    fn gradcheck_8_4_4_2() {
        let m = small();
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let op = PredictOp::new(m.clone(), x);
        let inputs = op.inputs();
        let r = grad_check(&op, &inputs, 1e-5, 1e-4);
        assert!(r.pass, "{r:?}");
    }
}
