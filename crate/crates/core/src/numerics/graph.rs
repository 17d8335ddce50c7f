//! Reverse-mode differentiation over the [`Backend`] op set.
//!
//! Nodes live in an arena in creation order. Every op's parents were created
//! before it, so walking the arena backwards from the root is a topological
//! order and each node is visited exactly once.

use super::backend::Backend;
use super::ops::{self, KL_EPS};
use super::tensor::Tensor;
use crate::error::{Result, StarError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddColBias(NodeId, NodeId),
    Softmax(NodeId),
    LayerNorm(NodeId, NodeId, NodeId),
    Gelu(NodeId),
    Relu(NodeId),
    KlDiv(NodeId, NodeId),
    FrobSqDiff(NodeId, NodeId),
    Sum(NodeId),
    SliceRows(NodeId, usize),
    ConcatRows(Vec<NodeId>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    /// Some leaf is reachable through this node's parents.
    tracked: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A trainable input. Receives a gradient on [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.leaves += 1;
        self.push(t, Op::Leaf, true)
    }

    /// An input that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Constant, false)
    }

    /// Number of trainable leaves created so far.
    pub fn leaf_count(&self) -> usize {
        self.leaves
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward root with respect to `id`, if `id` was
    /// reachable from it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradient with respect to `id`, or zeros if the root does not depend
    /// on it.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor {
        self.grad(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.get(id).shape()))
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            tracked,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn tracked(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tracked)
    }

    fn record(&mut self, value: Tensor, op: Op, parents: &[NodeId]) -> NodeId {
        let tracked = self.tracked(parents);
        self.push(value, op, tracked)
    }

    /// Populates gradients of the scalar `root` on every node it depends on.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(StarError::InvalidTensor(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let shape = self.nodes[root.0].value.shape().to_vec();
        self.nodes[root.0].grad = Some(Tensor::ones(&shape));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(upstream) = self.nodes[i].grad.clone() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &upstream)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contrib: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !node.tracked {
            return Ok(());
        }
        match &mut node.grad {
            None => node.grad = Some(contrib),
            Some(g) => {
                if g.shape() != contrib.shape() {
                    return Err(StarError::shape("backward", g.shape(), contrib.shape()));
                }
                for (a, b) in g.data_mut().iter_mut().zip(contrib.data()) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    fn propagate(&mut self, this: usize, op: &Op, dy: &Tensor) -> Result<()> {
        match *op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].tracked {
                    let bt = ops::transpose(self.get(b))?;
                    let ga = ops::matmul(dy, &bt)?;
                    self.accumulate(a, ga)?;
                }
                if self.nodes[b.0].tracked {
                    let at = ops::transpose(self.get(a))?;
                    let gb = ops::matmul(&at, dy)?;
                    self.accumulate(b, gb)?;
                }
            }
            Op::Transpose(a) => {
                let g = ops::transpose(dy)?;
                self.accumulate(a, g)?;
            }
            Op::Add(a, b) => {
                self.accumulate(a, dy.clone())?;
                self.accumulate(b, dy.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(a, dy.clone())?;
                self.accumulate(b, ops::scale(dy, -1.0))?;
            }
            Op::Mul(a, b) => {
                let ga = ops::mul(dy, self.get(b))?;
                let gb = ops::mul(dy, self.get(a))?;
                self.accumulate(a, ga)?;
                self.accumulate(b, gb)?;
            }
            Op::Scale(a, s) => self.accumulate(a, ops::scale(dy, s))?,
            Op::AddColBias(x, bias) => {
                self.accumulate(x, dy.clone())?;
                let (d, n) = dy.dims2()?;
                let sums = (0..d)
                    .map(|i| dy.data()[i * n..(i + 1) * n].iter().sum())
                    .collect();
                self.accumulate(bias, Tensor::from_parts(vec![d], sums)?)?;
            }
            Op::Softmax(x) => {
                let y = &self.nodes[this].value;
                let (m, n) = y.dims2()?;
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let dr = &dy.data()[r * n..(r + 1) * n];
                    // shifting dy by a constant leaves the result unchanged in
                    // exact arithmetic; this shift makes a constant row give 0
                    let d0 = dr[0];
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * (b - d0)).sum();
                    for j in 0..n {
                        gx[r * n + j] = yr[j] * ((dr[j] - d0) - dot);
                    }
                }
                self.accumulate(x, Tensor::from_parts(vec![m, n], gx)?)?;
            }
            Op::LayerNorm(x, gain, bias) => {
                let (gx, gg, gb) = layer_norm_backward(self.get(x), self.get(gain), dy)?;
                self.accumulate(x, gx)?;
                self.accumulate(gain, gg)?;
                self.accumulate(bias, gb)?;
            }
            Op::Gelu(x) => {
                let xv = self.get(x);
                let data = xv
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&v, &g)| g * ops::gelu_grad_scalar(v))
                    .collect();
                let g = Tensor::from_parts(xv.shape().to_vec(), data)?;
                self.accumulate(x, g)?;
            }
            Op::Relu(x) => {
                let xv = self.get(x);
                let data = xv
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                let g = Tensor::from_parts(xv.shape().to_vec(), data)?;
                self.accumulate(x, g)?;
            }
            Op::KlDiv(p, q) => {
                let s = dy.item();
                let (pv, qv) = (self.get(p), self.get(q));
                let mut gp = Vec::with_capacity(pv.numel());
                let mut gq = Vec::with_capacity(pv.numel());
                for (&a, &b) in pv.data().iter().zip(qv.data()) {
                    let qc = b.max(KL_EPS);
                    // p ln p has no finite derivative at p = 0; those entries get 0.
                    gp.push(if a > 0.0 { s * ((a / qc).ln() + 1.0) } else { 0.0 });
                    gq.push(if a > 0.0 && b > KL_EPS { -s * (a / b) } else { 0.0 });
                }
                let shape = pv.shape().to_vec();
                self.accumulate(p, Tensor::from_parts(shape.clone(), gp)?)?;
                self.accumulate(q, Tensor::from_parts(shape, gq)?)?;
            }
            Op::FrobSqDiff(a, b) => {
                let s = dy.item();
                let diff = ops::sub(self.get(a), self.get(b))?;
                self.accumulate(a, ops::scale(&diff, 2.0 * s))?;
                self.accumulate(b, ops::scale(&diff, -2.0 * s))?;
            }
            Op::Sum(a) => {
                let shape = self.get(a).shape().to_vec();
                self.accumulate(a, Tensor::full(&shape, dy.item()))?;
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.get(a).dims2()?;
                let mut g = vec![0.0; r * c];
                g[start * c..start * c + dy.numel()].copy_from_slice(dy.data());
                self.accumulate(a, Tensor::from_parts(vec![r, c], g)?)?;
            }
            Op::ConcatRows(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.get(p).numel();
                    let shape = self.get(p).shape().to_vec();
                    let g = Tensor::from_parts(shape, dy.data()[offset..offset + n].to_vec())?;
                    offset += n;
                    self.accumulate(p, g)?;
                }
            }
        }
        Ok(())
    }
}

fn layer_norm_backward(x: &Tensor, gain: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (d, n) = x.dims2()?;
    let (mean, sigma) = ops::column_stats(x);
    let (xd, g, dyd) = (x.data(), gain.data(), dy.data());
    let mut gx = vec![0.0; d * n];
    let mut gg = vec![0.0; d];
    let mut gb = vec![0.0; d];
    let inv_d = 1.0 / d as f64;
    for t in 0..n {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for k in 0..d {
            let xhat = (xd[k * n + t] - mean[t]) / sigma[t];
            let dxhat = dyd[k * n + t] * g[k];
            gg[k] += dyd[k * n + t] * xhat;
            gb[k] += dyd[k * n + t];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat;
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        for k in 0..d {
            let xhat = (xd[k * n + t] - mean[t]) / sigma[t];
            let dxhat = dyd[k * n + t] * g[k];
            gx[k * n + t] = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) / sigma[t];
        }
    }
    Ok((
        Tensor::from_parts(vec![d, n], gx)?,
        Tensor::from_parts(vec![d], gg)?,
        Tensor::from_parts(vec![d], gb)?,
    ))
}

impl Backend for Graph {
    type Value = NodeId;

    fn value<'a>(&'a self, v: &'a NodeId) -> &'a Tensor {
        self.get(*v)
    }

    fn constant(&mut self, t: Tensor) -> NodeId {
        Graph::constant(self, t)
    }

    fn matmul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = ops::matmul(self.get(*a), self.get(*b))?;
        Ok(self.record(v, Op::MatMul(*a, *b), &[*a, *b]))
    }

    fn transpose(&mut self, a: &NodeId) -> Result<NodeId> {
        let v = ops::transpose(self.get(*a))?;
        Ok(self.record(v, Op::Transpose(*a), &[*a]))
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = ops::add(self.get(*a), self.get(*b))?;
        Ok(self.record(v, Op::Add(*a, *b), &[*a, *b]))
    }

    fn sub(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = ops::sub(self.get(*a), self.get(*b))?;
        Ok(self.record(v, Op::Sub(*a, *b), &[*a, *b]))
    }

    fn mul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = ops::mul(self.get(*a), self.get(*b))?;
        Ok(self.record(v, Op::Mul(*a, *b), &[*a, *b]))
    }

    fn scale(&mut self, a: &NodeId, s: f64) -> NodeId {
        let v = ops::scale(self.get(*a), s);
        self.record(v, Op::Scale(*a, s), &[*a])
    }

    fn add_col_bias(&mut self, x: &NodeId, bias: &NodeId) -> Result<NodeId> {
        let v = ops::add_col_bias(self.get(*x), self.get(*bias))?;
        Ok(self.record(v, Op::AddColBias(*x, *bias), &[*x, *bias]))
    }

    fn softmax_rows(&mut self, x: &NodeId) -> Result<NodeId> {
        let v = ops::softmax_rows(self.get(*x))?;
        Ok(self.record(v, Op::Softmax(*x), &[*x]))
    }

    fn layer_norm(&mut self, x: &NodeId, gain: &NodeId, bias: &NodeId) -> Result<NodeId> {
        let v = ops::layer_norm(self.get(*x), self.get(*gain), self.get(*bias))?;
        Ok(self.record(v, Op::LayerNorm(*x, *gain, *bias), &[*x, *gain, *bias]))
    }

    fn gelu(&mut self, x: &NodeId) -> NodeId {
        let v = ops::gelu(self.get(*x));
        self.record(v, Op::Gelu(*x), &[*x])
    }

    fn relu(&mut self, x: &NodeId) -> NodeId {
        let v = ops::relu(self.get(*x));
        self.record(v, Op::Relu(*x), &[*x])
    }

    fn kl_div_rows(&mut self, p: &NodeId, q: &NodeId) -> Result<NodeId> {
        let v = ops::kl_div_rows(self.get(*p), self.get(*q))?;
        Ok(self.record(Tensor::scalar(v), Op::KlDiv(*p, *q), &[*p, *q]))
    }

    fn frobenius_sq_diff(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = ops::frobenius_sq_diff(self.get(*a), self.get(*b))?;
        Ok(self.record(Tensor::scalar(v), Op::FrobSqDiff(*a, *b), &[*a, *b]))
    }

    fn sum(&mut self, a: &NodeId) -> NodeId {
        let v = ops::sum(self.get(*a));
        self.record(Tensor::scalar(v), Op::Sum(*a), &[*a])
    }

    fn slice_rows(&mut self, a: &NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = ops::slice_rows(self.get(*a), start, end)?;
        Ok(self.record(v, Op::SliceRows(*a, start), &[*a]))
    }

    fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| self.get(*p)).collect();
        let v = ops::concat_rows(&refs)?;
        Ok(self.record(v, Op::ConcatRows(parts.to_vec()), parts))
    }
}
