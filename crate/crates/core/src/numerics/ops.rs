//! Forward kernels. Every function here is deterministic: reductions run in
//! a fixed loop order, so identical inputs give bit-identical outputs.

use super::tensor::Tensor;
use crate::error::{Result, StarError};

/// Variance regularizer inside the LayerNorm square root.
pub const LN_EPS: f64 = 1e-5;
/// Lower clamp applied to the second KL argument.
pub const KL_EPS: f64 = 1e-12;
/// Row-sum tolerance accepted by [`kl_div_rows`].
pub const DIST_TOL: f64 = 1e-6;

pub(crate) const GELU_C: f64 = 0.7978845608;
pub(crate) const GELU_A: f64 = 0.044715;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(StarError::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, a: &Tensor) -> Result<(usize, usize)> {
    a.dims2().map_err(|_| StarError::shape(op, a.shape(), &[]))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims("matmul", a)?;
    let (k2, n) = matrix_dims("matmul", b)?;
    if k != k2 {
        return Err(StarError::shape("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = matrix_dims("transpose", a)?;
    let d = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::from_parts(vec![c, r], out)
}

fn zip_with(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    a.map(|v| v * s)
}

/// Adds `bias[i]` to every entry of row `i` of a `d x N` matrix.
pub fn add_col_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (d, n) = matrix_dims("add_col_bias", x)?;
    if bias.shape() != [d] {
        return Err(StarError::shape("add_col_bias", x.shape(), bias.shape()));
    }
    let mut out = x.data().to_vec();
    for (i, &b) in bias.data().iter().enumerate() {
        for v in &mut out[i * n..(i + 1) * n] {
            *v += b;
        }
    }
    Tensor::from_parts(vec![d, n], out)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = matrix_dims("softmax_rows", x)?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n.max(1)).take(m) {
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
    Tensor::from_parts(vec![m, n], out)
}

/// Per-column mean and `sqrt(var + LN_EPS)` of a `d x N` matrix.
pub(crate) fn column_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (d, n) = (x.shape()[0], x.shape()[1]);
    let data = x.data();
    let mut mean = vec![0.0; n];
    let mut sigma = vec![0.0; n];
    for t in 0..n {
        let mut s = 0.0;
        for k in 0..d {
            s += data[k * n + t];
        }
        let mu = s / d as f64;
        let mut v = 0.0;
        for k in 0..d {
            let c = data[k * n + t] - mu;
            v += c * c;
        }
        mean[t] = mu;
        sigma[t] = (v / d as f64 + LN_EPS).sqrt();
    }
    (mean, sigma)
}

/// Normalizes every column (time step) of a `d x N` matrix over its `d`
/// channels, then applies the per-channel gain and bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (d, n) = matrix_dims("layer_norm", x)?;
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(StarError::shape("layer_norm", x.shape(), gain.shape()));
    }
    let (mean, sigma) = column_stats(x);
    let (xd, g, b) = (x.data(), gain.data(), bias.data());
    let mut out = vec![0.0; d * n];
    for k in 0..d {
        for t in 0..n {
            let xhat = (xd[k * n + t] - mean[t]) / sigma[t];
            out[k * n + t] = g[k] * xhat + b[k];
        }
    }
    Tensor::from_parts(vec![d, n], out)
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// GELU, tanh approximation.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Checks that every row is a probability distribution.
pub fn check_distribution_rows(p: &Tensor) -> Result<()> {
    let (_, n) = matrix_dims("kl_div_rows", p)?;
    for (row, r) in p.data().chunks(n.max(1)).enumerate() {
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > DIST_TOL || r.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(StarError::Distribution { row, sum });
        }
    }
    Ok(())
}

/// `sum_rows sum_j p_ij ln(p_ij / max(q_ij, KL_EPS))`, with `p_ij = 0` terms
/// contributing exactly zero.
pub fn kl_div_rows(p: &Tensor, q: &Tensor) -> Result<f64> {
    same_shape("kl_div_rows", p, q)?;
    check_distribution_rows(p)?;
    check_distribution_rows(q)?;
    Ok(kl_div_unchecked(p, q))
}

pub(crate) fn kl_div_unchecked(p: &Tensor, q: &Tensor) -> f64 {
    let mut total = 0.0;
    for (&pv, &qv) in p.data().iter().zip(q.data()) {
        if pv > 0.0 {
            total += pv * (pv / qv.max(KL_EPS)).ln();
        }
    }
    total
}

/// Sum of squared element-wise differences.
pub fn frobenius_sq_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("frobenius_sq_diff", a, b)?;
    let mut total = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x - y;
        total += d * d;
    }
    Ok(total)
}

pub fn sum(a: &Tensor) -> f64 {
    a.data().iter().sum()
}

/// Rows `start..end` of a matrix.
pub fn slice_rows(a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (r, c) = matrix_dims("slice_rows", a)?;
    if start >= end || end > r {
        return Err(StarError::shape("slice_rows", a.shape(), &[start, end]));
    }
    Tensor::from_parts(vec![end - start, c], a.data()[start * c..end * c].to_vec())
}

/// Stacks matrices with equal column counts vertically.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| StarError::InvalidTensor("concat_rows of nothing".into()))?;
    let (_, c) = matrix_dims("concat_rows", first)?;
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let (r, c2) = matrix_dims("concat_rows", p)?;
        if c2 != c {
            return Err(StarError::shape("concat_rows", first.shape(), p.shape()));
        }
        rows += r;
        data.extend_from_slice(p.data());
    }
    Tensor::from_parts(vec![rows, c], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_examples() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&a, &Tensor::eye(2)).unwrap(), a);
        let ones = Tensor::from_rows(&[&[1.0], &[1.0]]);
        assert_eq!(matmul(&a, &ones).unwrap(), Tensor::from_rows(&[&[3.0], &[7.0]]));
        let b = Tensor::full(&[3, 4], 2.5);
        assert_eq!(matmul(&Tensor::zeros(&[2, 3]), &b).unwrap(), Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, StarError::Shape { .. }));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::from_rows(&[&[0.0, 0.0]])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::from_rows(&[&[1f64.ln(), 3f64.ln()]])).unwrap();
        assert!(close(s.data()[0], 0.25, 1e-15) && close(s.data()[1], 0.75, 1e-15));
        let s = softmax_rows(&Tensor::from_rows(&[&[1000.0, 0.0]])).unwrap();
        assert!(s.is_finite());
        assert!(close(s.data()[0], 1.0, 1e-15) && s.data()[1] < 1e-300);
    }

    #[test]
    fn kl_examples() {
        let p = Tensor::from_rows(&[&[0.2, 0.8], &[0.5, 0.5]]);
        assert_eq!(kl_div_rows(&p, &p).unwrap(), 0.0);
        let one_hot = Tensor::from_rows(&[&[1.0, 0.0]]);
        let uniform = Tensor::from_rows(&[&[0.5, 0.5]]);
        assert!(close(kl_div_rows(&one_hot, &uniform).unwrap(), 2f64.ln(), 1e-15));
        let q = Tensor::from_rows(&[&[0.25, 0.75]]);
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!(close(kl_div_rows(&uniform, &q).unwrap(), expected, 1e-15));
        assert!(close(expected, 0.143841, 1e-6));
    }

    #[test]
    fn kl_clamps_zero_q_and_rejects_bad_rows() {
        let p = Tensor::from_rows(&[&[0.5, 0.5]]);
        let q = Tensor::from_rows(&[&[1.0, 0.0]]);
        let v = kl_div_rows(&p, &q).unwrap();
        assert!(close(v, 0.5 * 0.5f64.ln() + 0.5 * (0.5 / KL_EPS).ln(), 1e-12));
        let bad = Tensor::from_rows(&[&[0.5, 0.5], &[0.9, 0.3]]);
        match kl_div_rows(&bad, &bad).unwrap_err() {
            StarError::Distribution { row, .. } => assert_eq!(row, 1),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn frobenius_examples() {
        let i = Tensor::eye(2);
        assert_eq!(frobenius_sq_diff(&i, &i).unwrap(), 0.0);
        assert_eq!(frobenius_sq_diff(&i, &Tensor::zeros(&[2, 2])).unwrap(), 2.0);
        assert_eq!(
            frobenius_sq_diff(&Tensor::from_rows(&[&[3.0]]), &Tensor::from_rows(&[&[1.0]])).unwrap(),
            4.0
        );
        assert!(frobenius_sq_diff(&i, &Tensor::zeros(&[2, 1])).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::ones(&[2]);
        let b = Tensor::zeros(&[2]);
        let constant = Tensor::from_rows(&[&[3.0, -1.0], &[3.0, -1.0]]);
        assert_eq!(layer_norm(&constant, &g, &b).unwrap(), Tensor::zeros(&[2, 2]));

        let col = Tensor::from_rows(&[&[1.0], &[-1.0]]);
        let y = layer_norm(&col, &g, &b).unwrap();
        let expected = 1.0 / (1.0 + LN_EPS).sqrt();
        assert!(close(y.data()[0], expected, 1e-15) && close(y.data()[1], -expected, 1e-15));
        assert!(y.data()[0] < 1.0);

        let bias = Tensor::vector(vec![0.25, -2.0]).unwrap();
        let x = Tensor::from_rows(&[&[1.0, 4.0, -3.0], &[0.5, 2.0, 9.0]]);
        let y = layer_norm(&x, &Tensor::zeros(&[2]), &bias).unwrap();
        assert_eq!(y, Tensor::from_rows(&[&[0.25; 3], &[-2.0; 3]]));
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!(close(gelu_scalar(1.0), 0.8411919906, 1e-9));
        assert!(close(gelu_scalar(-1.0), -0.1588080094, 1e-9));
    }

    #[test]
    fn slice_and_concat_are_inverse() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let top = slice_rows(&a, 0, 1).unwrap();
        let rest = slice_rows(&a, 1, 3).unwrap();
        assert_eq!(concat_rows(&[&top, &rest]).unwrap(), a);
        assert!(slice_rows(&a, 2, 2).is_err());
        assert!(slice_rows(&a, 1, 4).is_err());
    }
}
