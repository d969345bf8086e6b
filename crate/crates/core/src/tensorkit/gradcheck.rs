use super::Tensor;
use crate::error::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A differentiable operation with an explicit backward rule.
///
/// `backward` must return one gradient per input, shaped like that input,
/// and be linear in `upstream`.
pub trait DiffOp {
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor>;
    fn backward(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub pass: bool,
    pub coords_checked: usize,
}

impl GradCheckReport {
    fn failed() -> Self {
        GradCheckReport {
            max_rel_error: f64::INFINITY,
            pass: false,
            coords_checked: 0,
        }
    }
}

/// Compares `op.backward` against central differences on every input
/// coordinate.
///
/// The output is reduced to a scalar through a fixed pseudo-random
/// projection so every output coordinate contributes. Relative error is
/// `|a − n| / max(|a|, |n|, 1e-8)`. Never fails: errors from the op show up
/// as `pass = false`.
pub fn grad_check(op: &dyn DiffOp, inputs: &[Tensor], eps: f64, tol: f64) -> GradCheckReport {
    grad_check_sampled(op, inputs, eps, tol, None)
}

/// Like [`grad_check`] but checks at most `max_coords` coordinates, spread
/// evenly over all inputs.
pub fn grad_check_sampled(
    op: &dyn DiffOp,
    inputs: &[Tensor],
    eps: f64,
    tol: f64,
    max_coords: Option<usize>,
) -> GradCheckReport {
    if !(eps > 0.0 && eps <= 1e-2) {
        return GradCheckReport::failed();
    }
    run(op, inputs, eps, tol, max_coords).unwrap_or_else(|_| GradCheckReport::failed())
}

fn run(
    op: &dyn DiffOp,
    inputs: &[Tensor],
    eps: f64,
    tol: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport> {
    let out = op.forward(inputs)?;
    if !out.is_finite() {
        return Ok(GradCheckReport::failed());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut projection = out.zeros_like();
    for v in projection.data_mut() {
        *v = rng.random_range(0.5..1.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    }
    let analytic = op.backward(inputs, &projection)?;
    if analytic.len() != inputs.len()
        || analytic.iter().zip(inputs).any(|(g, x)| g.shape() != x.shape())
    {
        return Ok(GradCheckReport::failed());
    }

    let total: usize = inputs.iter().map(Tensor::len).sum();
    let step = match max_coords {
        Some(limit) if limit > 0 && limit < total => total.div_ceil(limit),
        _ => 1,
    };

    let mut work = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    let mut flat = 0;
    for (which, input) in inputs.iter().enumerate() {
        for coord in 0..input.len() {
            let this = flat;
            flat += 1;
            if this % step != 0 {
                continue;
            }
            let original = input.data()[coord];
            work[which].data_mut()[coord] = original + eps;
            let plus = op.forward(&work)?.dot(&projection)?;
            work[which].data_mut()[coord] = original - eps;
            let minus = op.forward(&work)?.dot(&projection)?;
            work[which].data_mut()[coord] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let exact = analytic[which].data()[coord];
            let denom = exact.abs().max(numeric.abs()).max(1e-8);
            let rel = (exact - numeric).abs() / denom;
            if !rel.is_finite() {
                return Ok(GradCheckReport::failed());
            }
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        pass: max_rel < tol,
        coords_checked: checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorkit::{MatMulOp, SigmoidOp};

    struct DoubledMatMul;

    impl DiffOp for DoubledMatMul {
        fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
            MatMulOp.forward(inputs)
        }

        fn backward(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
            let mut grads = MatMulOp.backward(inputs, upstream)?;
            for g in &mut grads {
                g.scale(2.0);
            }
            Ok(grads)
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn matmul_passes() {
        let r = grad_check(&MatMulOp, &[random(&[3, 3], 1), random(&[3, 3], 2)], 1e-5, 1e-4);
        assert!(r.pass, "{r:?}");
        assert_eq!(r.coords_checked, 18);
    }

    #[test]
    fn corrupted_backward_fails() {
        let r = grad_check(&DoubledMatMul, &[random(&[3, 3], 1), random(&[3, 3], 2)], 1e-5, 1e-4);
        assert!(!r.pass);
        assert!(r.max_rel_error > 0.4);
    }

    #[test]
    fn sigmoid_is_tight() {
        let r = grad_check(&SigmoidOp, &[random(&[7], 3)], 1e-5, 1e-6);
        assert!(r.pass && r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn bad_eps_or_shapes_fail_without_panicking() {
        assert!(!grad_check(&MatMulOp, &[random(&[3, 3], 1), random(&[3, 3], 2)], 0.5, 1e-4).pass);
        assert!(!grad_check(&MatMulOp, &[random(&[3, 2], 1), random(&[3, 3], 2)], 1e-5, 1e-4).pass);
    }

    #[test]
    fn sampling_limits_coordinates() {
        let inputs = [random(&[6, 6], 1), random(&[6, 6], 2)];
        let r = grad_check_sampled(&MatMulOp, &inputs, 1e-5, 1e-4, Some(10));
        assert!(r.pass);
        assert!(r.coords_checked <= 10 && r.coords_checked >= 8);
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let inputs = [random(&[3, 4], 5), random(&[4, 2], 6)];
        let u = random(&[3, 2], 7);
        let mut u3 = u.clone();
        u3.scale(3.0);
        let g1 = MatMulOp.backward(&inputs, &u).unwrap();
        let g3 = MatMulOp.backward(&inputs, &u3).unwrap();
        for (a, b) in g1.iter().zip(&g3) {
            let mut a3 = a.clone();
            a3.scale(3.0);
            assert!(a3.max_abs_diff(b) < 1e-12);
        }
    }
}
