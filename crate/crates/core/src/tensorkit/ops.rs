use super::{DiffOp, Tensor};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before taking logs.
pub const BCE_CLAMP: f64 = 1e-12;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            other => Err(Error::Config(format!(
                "loss_reduction must be sum or mean, got {other:?}"
            ))),
        }
    }
}

const MR: usize = 4;
const NR: usize = 16;

// c (m×n) += a · b where element (i, p) of a is a[i * rs + p * cs], so the
// same kernel serves a and aᵀ. Works on MR×NR register tiles; each c[i][j]
// is accumulated in ascending p order.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    a: &[f64],
    rs: usize,
    cs: usize,
    b: &[f64],
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    let mut i = 0;
    while i < m {
        let mr = MR.min(m - i);
        let mut j = 0;
        while j < n {
            let nr = NR.min(n - j);
            if mr == MR && nr == NR {
                let mut acc = [[0.0f64; NR]; MR];
                for p in 0..k {
                    let brow: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
                    for (r, accr) in acc.iter_mut().enumerate() {
                        let av = a[(i + r) * rs + p * cs];
                        for q in 0..NR {
                            accr[q] += av * brow[q];
                        }
                    }
                }
                for (r, accr) in acc.iter().enumerate() {
                    let crow = &mut c[(i + r) * n + j..(i + r) * n + j + NR];
                    for q in 0..NR {
                        crow[q] += accr[q];
                    }
                }
            } else {
                for r in 0..mr {
                    let mut acc = [0.0f64; NR];
                    for p in 0..k {
                        let av = a[(i + r) * rs + p * cs];
                        let brow = &b[p * n + j..p * n + j + nr];
                        for q in 0..nr {
                            acc[q] += av * brow[q];
                        }
                    }
                    let crow = &mut c[(i + r) * n + j..(i + r) * n + j + nr];
                    for q in 0..nr {
                        crow[q] += acc[q];
                    }
                }
            }
            j += nr;
        }
        i += mr;
    }
}

// c (m×n) += a (m×k) · b (k×n)
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_strided(a, k, 1, b, c, m, k, n);
}

// c (m×n) += aᵀ · b, with a stored k×m and b stored k×n
fn gemm_at_acc(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    gemm_strided(a, 1, m, b, c, m, k, n);
}

fn check_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(Error::dim(op, t.shape(), &[0, 0]))
    }
}

/// `A · B` for `A: m×k`, `B: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix("matmul", a)?;
    check_matrix("matmul", b)?;
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    if b.rows() != k {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    gemm_acc(a.data(), b.data(), &mut out, m, k, n);
    Tensor::matrix(m, n, out)
}

/// `Aᵀ · B` for `A: k×m`, `B: k×n`.
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix("matmul_at", a)?;
    check_matrix("matmul_at", b)?;
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    if b.rows() != k {
        return Err(Error::dim("matmul_at", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    gemm_at_acc(a.data(), b.data(), &mut out, k, m, n);
    Tensor::matrix(m, n, out)
}

/// `A · Bᵀ` for `A: m×k`, `B: n×k`.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix("matmul_bt", a)?;
    check_matrix("matmul_bt", b)?;
    if a.cols() != b.cols() {
        return Err(Error::dim("matmul_bt", a.shape(), b.shape()));
    }
    matmul(a, &b.transpose())
}

/// Returns `(dA, dB) = (dC·Bᵀ, Aᵀ·dC)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> Result<(Tensor, Tensor)> {
    if dc.shape() != [a.rows(), b.cols()] {
        return Err(Error::dim("matmul_backward", dc.shape(), &[a.rows(), b.cols()]));
    }
    Ok((matmul_bt(dc, b)?, matmul_at(a, dc)?))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

/// Adds a length-`d` bias to every row of an `n×d` matrix.
pub fn add_row_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if bias.len() != x.cols() {
        return Err(Error::dim("add_row_bias", x.shape(), bias.shape()));
    }
    let mut out = x.clone();
    for i in 0..out.rows() {
        for (v, b) in out.row_mut(i).iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(out)
}

/// Gradient of a broadcast row bias: column sums of the upstream gradient.
pub fn column_sums(dy: &Tensor) -> Tensor {
    let mut out = vec![0.0; dy.cols()];
    for i in 0..dy.rows() {
        for (o, v) in out.iter_mut().zip(dy.row(i)) {
            *o += v;
        }
    }
    Tensor::vector(out)
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Backward of [`softmax_rows`] given its output `y`.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if y.shape() != dy.shape() {
        return Err(Error::dim("softmax_rows_backward", y.shape(), dy.shape()));
    }
    let mut dx = dy.clone();
    for i in 0..y.rows() {
        let yr = y.row(i);
        let inner: f64 = yr.iter().zip(dy.row(i)).map(|(a, b)| a * b).sum();
        for (d, yv) in dx.row_mut(i).iter_mut().zip(yr) {
            *d = yv * (*d - inner);
        }
    }
    Ok(dx)
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = v.max(0.0);
    }
    out
}

/// Backward of [`relu`] given its input `x`.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if x.shape() != dy.shape() {
        return Err(Error::dim("relu_backward", x.shape(), dy.shape()));
    }
    let mut dx = dy.clone();
    for (d, xv) in dx.data_mut().iter_mut().zip(x.data()) {
        if *xv <= 0.0 {
            *d = 0.0;
        }
    }
    Ok(dx)
}

/// Largest `f64` below 1.
const ONE_BELOW: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function, kept strictly inside `(0, 1)` even where `f64`
/// would round to an endpoint.
pub fn sigmoid_scalar(x: f64) -> f64 {
    // Branch on sign so exp never overflows.
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, ONE_BELOW)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = sigmoid_scalar(*v);
    }
    out
}

/// Backward of [`sigmoid`] given its output `y`.
pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if y.shape() != dy.shape() {
        return Err(Error::dim("sigmoid_backward", y.shape(), dy.shape()));
    }
    let mut dx = dy.clone();
    for (d, yv) in dx.data_mut().iter_mut().zip(y.data()) {
        *d *= yv * (1.0 - yv);
    }
    Ok(dx)
}

/// Saved activations of a layer-norm forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

/// Per-row normalisation to zero mean and unit variance followed by an
/// affine `gain`/`bias`.
pub fn layer_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let d = x.cols();
    if d < 2 {
        return Err(Error::dim("layer_norm", x.shape(), &[2]));
    }
    if gain.len() != d || bias.len() != d {
        return Err(Error::dim("layer_norm", x.shape(), gain.shape()));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
    }
    let mut normalized = x.clone();
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std.push(istd);
        let nrow = normalized.row_mut(i);
        for v in nrow.iter_mut() {
            *v = (*v - mean) * istd;
        }
        for ((o, nv), (g, b)) in out
            .row_mut(i)
            .iter_mut()
            .zip(nrow.iter())
            .zip(gain.data().iter().zip(bias.data()))
        {
            *o = nv * g + b;
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let xhat = &cache.normalized;
    if xhat.shape() != dy.shape() {
        return Err(Error::dim("layer_norm_backward", xhat.shape(), dy.shape()));
    }
    let d = xhat.cols();
    let df = d as f64;
    let mut dx = dy.zeros_like();
    let mut dgain = vec![0.0; d];
    let mut dbias = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for i in 0..xhat.rows() {
        let xr = xhat.row(i);
        let dyr = dy.row(i);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..d {
            dgain[j] += dyr[j] * xr[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain.data()[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xr[j];
        }
        let scale = cache.inv_std[i] / df;
        for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
            *out = scale * (df * dxhat[j] - sum_dxhat - xr[j] * sum_dxhat_xhat);
        }
    }
    Ok((dx, Tensor::vector(dgain), Tensor::vector(dbias)))
}

fn check_labels(probs: &Tensor, labels: &Tensor) -> Result<()> {
    if probs.shape() != labels.shape() {
        return Err(Error::dim("bce_loss", probs.shape(), labels.shape()));
    }
    Ok(())
}

/// Binary cross-entropy `−Σ[y·log ŷ + (1−y)·log(1−ŷ)]`, optionally averaged.
pub fn bce_loss(probs: &Tensor, labels: &Tensor, reduction: Reduction) -> Result<f64> {
    weighted_bce_loss(probs, labels, 1.0, reduction)
}

/// Binary cross-entropy with the positive term scaled by `pos_weight`.
pub fn weighted_bce_loss(
    probs: &Tensor,
    labels: &Tensor,
    pos_weight: f64,
    reduction: Reduction,
) -> Result<f64> {
    check_labels(probs, labels)?;
    let total: f64 = probs
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(pos_weight * y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / probs.len() as f64,
    })
}

/// Gradient of [`weighted_bce_loss`] with respect to the probabilities.
pub fn bce_loss_backward(
    probs: &Tensor,
    labels: &Tensor,
    pos_weight: f64,
    reduction: Reduction,
) -> Result<Tensor> {
    check_labels(probs, labels)?;
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / probs.len() as f64,
    };
    let mut grad = probs.zeros_like();
    for ((g, &p), &y) in grad.data_mut().iter_mut().zip(probs.data()).zip(labels.data()) {
        if p <= BCE_CLAMP || p >= 1.0 - BCE_CLAMP {
            // clamped region is flat
            continue;
        }
        *g = scale * (-pos_weight * y / p + (1.0 - y) / (1.0 - p));
    }
    Ok(grad)
}

/// Splits an `n×(h·w)` matrix into `h` column blocks of width `w`.
pub fn split_cols(x: &Tensor, parts: usize) -> Result<Vec<Tensor>> {
    if parts == 0 || !x.cols().is_multiple_of(parts) {
        return Err(Error::dim("split_cols", x.shape(), &[parts]));
    }
    let w = x.cols() / parts;
    (0..parts)
        .map(|h| {
            let mut data = Vec::with_capacity(x.rows() * w);
            for i in 0..x.rows() {
                data.extend_from_slice(&x.row(i)[h * w..(h + 1) * w]);
            }
            Tensor::matrix(x.rows(), w, data)
        })
        .collect()
}

/// Concatenates equal-height matrices along columns.
pub fn concat_cols(blocks: &[Tensor]) -> Result<Tensor> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::Empty("concat_cols needs at least one block".into()))?;
    let n = first.rows();
    if blocks.iter().any(|b| b.rows() != n) {
        return Err(Error::dim("concat_cols", first.shape(), blocks[1].shape()));
    }
    let width: usize = blocks.iter().map(|b| b.cols()).sum();
    let mut data = Vec::with_capacity(n * width);
    for i in 0..n {
        for b in blocks {
            data.extend_from_slice(b.row(i));
        }
    }
    Tensor::matrix(n, width, data)
}

pub struct MatMulOp;

impl DiffOp for MatMulOp {
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        matmul(&inputs[0], &inputs[1])
    }

    fn backward(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let (da, db) = matmul_backward(&inputs[0], &inputs[1], upstream)?;
        Ok(vec![da, db])
    }
}

pub struct SoftmaxRowsOp;

impl DiffOp for SoftmaxRowsOp {
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        Ok(softmax_rows(&inputs[0]))
    }

    fn backward(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let y = softmax_rows(&inputs[0]);
        Ok(vec![softmax_rows_backward(&y, upstream)?])
    }
}

pub struct ReluOp;

impl DiffOp for ReluOp {
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        Ok(relu(&inputs[0]))
    }

    fn backward(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![relu_backward(&inputs[0], upstream)?])
    }
}

pub struct SigmoidOp;

impl DiffOp for SigmoidOp {
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        Ok(sigmoid(&inputs[0]))
    }

    fn backward(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![sigmoid_backward(&sigmoid(&inputs[0]), upstream)?])
    }
}

/// Inputs: `x`, `gain`, `bias`.
pub struct LayerNormOp {
    pub eps: f64,
}

impl DiffOp for LayerNormOp {
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        Ok(layer_norm(&inputs[0], &inputs[1], &inputs[2], self.eps)?.0)
    }

    fn backward(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let (_, cache) = layer_norm(&inputs[0], &inputs[1], &inputs[2], self.eps)?;
        let (dx, dg, db) = layer_norm_backward(&cache, &inputs[1], upstream)?;
        Ok(vec![dx, dg, db])
    }
}

/// Inputs: `x`, `bias`.
pub struct AddRowBiasOp;

impl DiffOp for AddRowBiasOp {
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        add_row_bias(&inputs[0], &inputs[1])
    }

    fn backward(&self, _inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![upstream.clone(), column_sums(upstream)])
    }
}

/// Input: probabilities. Output: the scalar loss as a length-1 tensor.
pub struct BceLossOp {
    pub labels: Tensor,
    pub pos_weight: f64,
    pub reduction: Reduction,
}

impl DiffOp for BceLossOp {
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let loss = weighted_bce_loss(&inputs[0], &self.labels, self.pos_weight, self.reduction)?;
        Ok(Tensor::scalar(loss))
    }

    fn backward(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = bce_loss_backward(&inputs[0], &self.labels, self.pos_weight, self.reduction)?;
        g.scale(upstream.data()[0]);
        Ok(vec![g])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorkit::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let b = m(&[&[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap(), b);
        let c = matmul(&m(&[&[1.0, 2.0]]), &m(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut r = rng(1);
        let a = Tensor::uniform(&[4, 3], 1.0, &mut r);
        let b = Tensor::uniform(&[3, 5], 1.0, &mut r);
        let report = grad_check(&MatMulOp, &[a, b], 1e-5, 1e-6);
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let mut r = rng(2);
        let a = Tensor::uniform(&[3, 4], 1.0, &mut r);
        let b = Tensor::uniform(&[5, 4], 1.0, &mut r);
        let direct = matmul(&a, &b.transpose()).unwrap();
        assert!(matmul_bt(&a, &b).unwrap().max_abs_diff(&direct) < 1e-15);
        let at = matmul_at(&a.transpose(), &b.transpose()).unwrap();
        assert!(at.max_abs_diff(&direct) < 1e-15);
    }

    #[test]
    fn matmul_is_associative() {
        let mut r = rng(3);
        for _ in 0..10 {
            let a = Tensor::uniform(&[4, 4], 1.0, &mut r);
            let b = Tensor::uniform(&[4, 4], 1.0, &mut r);
            let c = Tensor::uniform(&[4, 4], 1.0, &mut r);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                assert!((x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0));
            }
        }
    }

    #[test]
    fn softmax_cases() {
        let z = softmax_rows(&Tensor::zeros(&[1, 4]));
        assert_eq!(z.data(), &[0.25; 4]);
        let big = softmax_rows(&m(&[&[1000.0, 0.0]]));
        assert!(big.is_finite());
        assert!((big.data()[0] - 1.0).abs() < 1e-15);
        assert!(big.data()[1] < 1e-300);
        let s = softmax_rows(&Tensor::uniform(&[3, 3], 5.0, &mut rng(4)));
        for i in 0..3 {
            assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_and_derivative_at_zero() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        let d = sigmoid_backward(&sigmoid(&Tensor::scalar(0.0)), &Tensor::scalar(1.0)).unwrap();
        assert_eq!(d.data()[0], 0.25);
        let h = 1e-5;
        let fd = (sigmoid_scalar(h) - sigmoid_scalar(-h)) / (2.0 * h);
        assert!((fd - 0.25).abs() < 1e-6);
        assert!(sigmoid_scalar(-800.0) > 0.0);
        assert!(sigmoid_scalar(800.0) < 1.0);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::full(&[2, 5], 3.7);
        let (y, _) = layer_norm(&x, &Tensor::full(&[5], 1.0), &Tensor::zeros(&[5]), 1e-5).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_rejects_width_one() {
        let x = Tensor::zeros(&[2, 1]);
        assert!(layer_norm(&x, &Tensor::zeros(&[1]), &Tensor::zeros(&[1]), 1e-5).is_err());
    }

    #[test]
    fn layer_norm_output_has_unit_variance() {
        let x = Tensor::uniform(&[3, 8], 4.0, &mut rng(5));
        let (y, _) = layer_norm(&x, &Tensor::full(&[8], 1.0), &Tensor::zeros(&[8]), 1e-12).unwrap();
        for i in 0..3 {
            let r = y.row(i);
            let mean = r.iter().sum::<f64>() / 8.0;
            let var = r.iter().map(|v| v * v).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn bce_cases() {
        let near_one = Tensor::vector(vec![1.0 - BCE_CLAMP]);
        let loss = bce_loss(&near_one, &Tensor::vector(vec![1.0]), Reduction::Sum).unwrap();
        assert!(loss < 1e-11);
        let half = Tensor::vector(vec![0.5, 0.5]);
        let loss = bce_loss(&half, &Tensor::vector(vec![0.0, 1.0]), Reduction::Sum).unwrap();
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((loss - 1.3863).abs() < 1e-4);
        // exact 0 and 1 stay finite
        let edge = Tensor::vector(vec![0.0, 1.0]);
        let loss = bce_loss(&edge, &Tensor::vector(vec![1.0, 0.0]), Reduction::Sum).unwrap();
        assert!(loss.is_finite());
        assert!(bce_loss(&half, &Tensor::vector(vec![1.0]), Reduction::Sum).is_err());
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut r = rng(6);
        let probs = Tensor::new(
            vec![3, 4],
            (0..12).map(|_| r.random_range(0.05..0.95)).collect(),
        )
        .unwrap();
        let labels = Tensor::new(
            vec![3, 4],
            (0..12).map(|_| f64::from(r.random_bool(0.5) as u8)).collect(),
        )
        .unwrap();
        for reduction in [Reduction::Sum, Reduction::Mean] {
            for pos_weight in [1.0, 3.0] {
                let op = BceLossOp {
                    labels: labels.clone(),
                    pos_weight,
                    reduction,
                };
                let report = grad_check(&op, std::slice::from_ref(&probs), 1e-5, 1e-6);
                assert!(report.pass, "{reduction:?} {pos_weight}: {report:?}");
            }
        }
    }

    #[test]
    fn every_op_passes_gradcheck_on_three_shapes() {
        let mut r = rng(7);
        for &(n, d) in &[(2, 3), (4, 4), (5, 7)] {
            let x = Tensor::uniform(&[n, d], 2.0, &mut r);
            let k = Tensor::uniform(&[d, 3], 1.0, &mut r);
            let gain = Tensor::uniform(&[d], 1.5, &mut r);
            let bias = Tensor::uniform(&[d], 1.0, &mut r);
            // keep relu inputs away from the kink
            let mut rx = x.clone();
            for v in rx.data_mut() {
                if v.abs() < 0.01 {
                    *v += 0.05;
                }
            }
            let cases: Vec<(&str, Box<dyn DiffOp>, Vec<Tensor>)> = vec![
                ("matmul", Box::new(MatMulOp), vec![x.clone(), k]),
                ("softmax", Box::new(SoftmaxRowsOp), vec![x.clone()]),
                ("relu", Box::new(ReluOp), vec![rx]),
                ("sigmoid", Box::new(SigmoidOp), vec![x.clone()]),
                (
                    "layer_norm",
                    Box::new(LayerNormOp { eps: LAYER_NORM_EPS }),
                    vec![x.clone(), gain, bias.clone()],
                ),
                ("add_row_bias", Box::new(AddRowBiasOp), vec![x.clone(), bias]),
            ];
            for (name, op, inputs) in cases {
                let report = grad_check(op.as_ref(), &inputs, 1e-5, 1e-4);
                assert!(report.pass, "{name} {n}x{d}: {report:?}");
            }
        }
    }

    #[test]
    fn split_and_concat_are_inverse() {
        let x = Tensor::uniform(&[3, 8], 1.0, &mut rng(8));
        let parts = split_cols(&x, 4).unwrap();
        assert_eq!(parts.len(), 4);
        assert_eq!(parts[1].shape(), &[3, 2]);
        assert_eq!(concat_cols(&parts).unwrap(), x);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            rows in 1usize..5,
            vals in proptest::collection::vec(-700.0f64..700.0, 1..40),
        ) {
            let cols = vals.len();
            let x = Tensor::new(vec![1, cols], vals).unwrap();
            let x = Tensor::new(vec![rows, cols], x.data().repeat(rows)).unwrap();
            let y = softmax_rows(&x);
            for i in 0..rows {
                let s: f64 = y.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                prop_assert!(y.row(i).iter().all(|v| *v >= 0.0));
            }
        }

        #[test]
        fn activations_stay_in_range(vals in proptest::collection::vec(-30.0f64..30.0, 1..50)) {
            let x = Tensor::vector(vals);
            prop_assert!(sigmoid(&x).data().iter().all(|v| *v > 0.0 && *v < 1.0));
            prop_assert!(relu(&x).data().iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn bce_sum_is_count_times_mean(
            pairs in proptest::collection::vec((0.001f64..0.999, any::<bool>()), 1..64),
        ) {
            let probs = Tensor::vector(pairs.iter().map(|p| p.0).collect());
            let labels = Tensor::vector(pairs.iter().map(|p| f64::from(p.1 as u8)).collect());
            let sum = bce_loss(&probs, &labels, Reduction::Sum).unwrap();
            let mean = bce_loss(&probs, &labels, Reduction::Mean).unwrap();
            let scaled = mean * pairs.len() as f64;
            prop_assert!((sum - scaled).abs() <= 1e-12 * sum.abs().max(1e-300));
        }
    }
}
