use super::config::ModelConfig;
use super::params::{LayerParams, ModelWeights, Params};
use crate::error::{Result, StarError};
use crate::numerics::{Backend, Eager, Graph, NodeId, Tensor};

/// Everything a forward pass exposes to the distillation losses.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<V> {
    /// `F^0..F^L`, each `d x N`. `F^0` is the input of the first block
    /// (the projected frame features), `F^l` the residual stream after
    /// block `l`.
    pub features: Vec<V>,
    /// `attn_maps[l][h]` is the `N x N` map of head `h` in block `l + 1`.
    /// Row `t` is the attention distribution of query step `t`.
    pub attn_maps: Vec<Vec<V>>,
    /// Final-norm output of the encoder. Not used by the losses.
    pub output: V,
    pub seq_len: usize,
}

impl<V> ForwardTrace<V> {
    pub fn num_layers(&self) -> usize {
        self.attn_maps.len()
    }

    pub fn num_heads(&self) -> usize {
        self.attn_maps.first().map_or(0, Vec::len)
    }

    pub fn map<U>(&self, mut f: impl FnMut(&V) -> U) -> ForwardTrace<U> {
        ForwardTrace {
            features: self.features.iter().map(&mut f).collect(),
            attn_maps: self
                .attn_maps
                .iter()
                .map(|heads| heads.iter().map(&mut f).collect())
                .collect(),
            output: f(&self.output),
            seq_len: self.seq_len,
        }
    }
}

impl ForwardTrace<NodeId> {
    /// Copies node values out of the graph.
    pub fn values(&self, graph: &Graph) -> ForwardTrace<Tensor> {
        self.map(|id| graph.get(*id).clone())
    }
}

/// `softmax(q^T k / sqrt(d_h))` for one head, `q` and `k` being `d_h x N`.
pub fn attention_map<B: Backend>(b: &mut B, q: &B::Value, k: &B::Value) -> Result<B::Value> {
    let (qs, ks) = (b.value(q).shape().to_vec(), b.value(k).shape().to_vec());
    if qs.len() != 2 || qs != ks {
        return Err(StarError::shape("attention_map", &qs, &ks));
    }
    let qt = b.transpose(q)?;
    let logits = b.matmul(&qt, k)?;
    let scaled = b.scale(&logits, 1.0 / (qs[0] as f64).sqrt());
    b.softmax_rows(&scaled)
}

fn self_attention<B: Backend>(
    b: &mut B,
    cfg: &ModelConfig,
    p: &LayerParams<B::Value>,
    x: &B::Value,
) -> Result<(B::Value, Vec<B::Value>)> {
    let q = b.linear(&p.q_weight, &p.q_bias, x)?;
    let k = b.linear(&p.k_weight, &p.k_bias, x)?;
    let v = b.linear(&p.v_weight, &p.v_bias, x)?;
    let dh = cfg.head_dim();
    let mut maps = Vec::with_capacity(cfg.num_heads);
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = b.slice_rows(&q, lo, hi)?;
        let kh = b.slice_rows(&k, lo, hi)?;
        let vh = b.slice_rows(&v, lo, hi)?;
        let a = attention_map(b, &qh, &kh)?;
        // out[:, t] = sum_s A[t, s] v[:, s]
        let at = b.transpose(&a)?;
        heads.push(b.matmul(&vh, &at)?);
        maps.push(a);
    }
    let merged = b.concat_rows(&heads)?;
    let out = b.linear(&p.out_weight, &p.out_bias, &merged)?;
    Ok((out, maps))
}

fn feed_forward<B: Backend>(b: &mut B, p: &LayerParams<B::Value>, x: &B::Value) -> Result<B::Value> {
    let hidden = b.linear(&p.ffn_in_weight, &p.ffn_in_bias, x)?;
    let act = b.gelu(&hidden);
    b.linear(&p.ffn_out_weight, &p.ffn_out_bias, &act)
}

fn block<B: Backend>(
    b: &mut B,
    cfg: &ModelConfig,
    p: &LayerParams<B::Value>,
    x: &B::Value,
) -> Result<(B::Value, Vec<B::Value>)> {
    if cfg.post_ln {
        let (attn, maps) = self_attention(b, cfg, p, x)?;
        let r = b.add(x, &attn)?;
        let x1 = b.layer_norm(&r, &p.attn_norm_gain, &p.attn_norm_bias)?;
        let ff = feed_forward(b, p, &x1)?;
        let r = b.add(&x1, &ff)?;
        let x2 = b.layer_norm(&r, &p.ffn_norm_gain, &p.ffn_norm_bias)?;
        Ok((x2, maps))
    } else {
        let h = b.layer_norm(x, &p.attn_norm_gain, &p.attn_norm_bias)?;
        let (attn, maps) = self_attention(b, cfg, p, &h)?;
        let x1 = b.add(x, &attn)?;
        let h = b.layer_norm(&x1, &p.ffn_norm_gain, &p.ffn_norm_bias)?;
        let ff = feed_forward(b, p, &h)?;
        Ok((b.add(&x1, &ff)?, maps))
    }
}

/// Runs the encoder on an `input_dim x N` sequence with any backend.
pub fn forward<B: Backend>(
    b: &mut B,
    cfg: &ModelConfig,
    params: &Params<B::Value>,
    input: &B::Value,
) -> Result<ForwardTrace<B::Value>> {
    let shape = b.value(input).shape().to_vec();
    if shape.len() != 2 || shape[0] != cfg.input_dim || shape[1] == 0 {
        return Err(StarError::shape("forward input", &shape, &[cfg.input_dim, 0]));
    }
    if params.layers.len() != cfg.num_layers {
        return Err(StarError::Config(format!(
            "config has {} layers, parameters have {}",
            cfg.num_layers,
            params.layers.len()
        )));
    }
    let mut x = b.linear(&params.input_weight, &params.input_bias, input)?;
    let mut features = vec![x.clone()];
    let mut attn_maps = Vec::with_capacity(cfg.num_layers);
    for layer in &params.layers {
        let (next, maps) = block(b, cfg, layer, &x)?;
        features.push(next.clone());
        attn_maps.push(maps);
        x = next;
    }
    let output = b.layer_norm(&x, &params.final_norm_gain, &params.final_norm_bias)?;
    Ok(ForwardTrace {
        features,
        attn_maps,
        output,
        seq_len: shape[1],
    })
}

/// Plain evaluation, no gradient bookkeeping.
pub fn forward_with_trace(weights: &ModelWeights, input: &Tensor) -> Result<ForwardTrace<Tensor>> {
    forward(&mut Eager, &weights.config, &weights.params, input)
}

/// Records the forward pass in `graph`. Values equal those of
/// [`forward_with_trace`] bit for bit.
pub fn forward_diff(
    graph: &mut Graph,
    cfg: &ModelConfig,
    params: &Params<NodeId>,
    input: NodeId,
) -> Result<ForwardTrace<NodeId>> {
    forward(graph, cfg, params, &input)
}
