use super::ops;
use super::tensor::Tensor;
use crate::error::Result;

/// The op set the encoder and the losses are written against.
///
/// [`Eager`] evaluates directly on tensors. [`Graph`](super::Graph) records
/// the same ops for reverse-mode differentiation. Both call the kernels in
/// [`ops`], so a computation expressed once produces bit-identical values on
/// either backend.
pub trait Backend {
    type Value: Clone;

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;

    /// Lifts a tensor that should not receive gradients.
    fn constant(&mut self, t: Tensor) -> Self::Value;

    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn transpose(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, a: &Self::Value, s: f64) -> Self::Value;
    fn add_col_bias(&mut self, x: &Self::Value, bias: &Self::Value) -> Result<Self::Value>;
    fn softmax_rows(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn layer_norm(
        &mut self,
        x: &Self::Value,
        gain: &Self::Value,
        bias: &Self::Value,
    ) -> Result<Self::Value>;
    fn gelu(&mut self, x: &Self::Value) -> Self::Value;
    fn relu(&mut self, x: &Self::Value) -> Self::Value;
    /// Scalar KL divergence summed over rows; see [`ops::kl_div_rows`].
    fn kl_div_rows(&mut self, p: &Self::Value, q: &Self::Value) -> Result<Self::Value>;
    fn frobenius_sq_diff(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sum(&mut self, a: &Self::Value) -> Self::Value;
    fn slice_rows(&mut self, a: &Self::Value, start: usize, end: usize) -> Result<Self::Value>;
    fn concat_rows(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;

    /// `x W`-style linear map on `d x N` features: `weight * x + bias`.
    fn linear(
        &mut self,
        weight: &Self::Value,
        bias: &Self::Value,
        x: &Self::Value,
    ) -> Result<Self::Value> {
        let y = self.matmul(weight, x)?;
        self.add_col_bias(&y, bias)
    }

    fn scalar_of(&self, v: &Self::Value) -> f64 {
        self.value(v).item()
    }
}

/// Direct evaluation on owned tensors.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Backend for Eager {
    type Value = Tensor;

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::matmul(a, b)
    }

    fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        ops::transpose(a)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::add(a, b)
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::sub(a, b)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::mul(a, b)
    }

    fn scale(&mut self, a: &Tensor, s: f64) -> Tensor {
        ops::scale(a, s)
    }

    fn add_col_bias(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        ops::add_col_bias(x, bias)
    }

    fn softmax_rows(&mut self, x: &Tensor) -> Result<Tensor> {
        ops::softmax_rows(x)
    }

    fn layer_norm(&mut self, x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        ops::layer_norm(x, gain, bias)
    }

    fn gelu(&mut self, x: &Tensor) -> Tensor {
        ops::gelu(x)
    }

    fn relu(&mut self, x: &Tensor) -> Tensor {
        ops::relu(x)
    }

    fn kl_div_rows(&mut self, p: &Tensor, q: &Tensor) -> Result<Tensor> {
        ops::kl_div_rows(p, q).map(Tensor::scalar)
    }

    fn frobenius_sq_diff(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::frobenius_sq_diff(a, b).map(Tensor::scalar)
    }

    fn sum(&mut self, a: &Tensor) -> Tensor {
        Tensor::scalar(ops::sum(a))
    }

    fn slice_rows(&mut self, a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        ops::slice_rows(a, start, end)
    }

    fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        ops::concat_rows(&refs)
    }
}
