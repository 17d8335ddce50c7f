use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Result, StarError};
use crate::numerics::{Graph, NodeId, Tensor};

/// Parameters of one encoder block. Linear weights are `out x in` and act on
/// `in x N` feature matrices from the left.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<V> {
    pub q_weight: V,
    pub q_bias: V,
    pub k_weight: V,
    pub k_bias: V,
    pub v_weight: V,
    pub v_bias: V,
    pub out_weight: V,
    pub out_bias: V,
    pub attn_norm_gain: V,
    pub attn_norm_bias: V,
    pub ffn_norm_gain: V,
    pub ffn_norm_bias: V,
    pub ffn_in_weight: V,
    pub ffn_in_bias: V,
    pub ffn_out_weight: V,
    pub ffn_out_bias: V,
}

const LAYER_SUFFIXES: [&str; 16] = [
    "q_proj.weight",
    "q_proj.bias",
    "k_proj.weight",
    "k_proj.bias",
    "v_proj.weight",
    "v_proj.bias",
    "out_proj.weight",
    "out_proj.bias",
    "attn_norm.gain",
    "attn_norm.bias",
    "ffn_norm.gain",
    "ffn_norm.bias",
    "ffn_in.weight",
    "ffn_in.bias",
    "ffn_out.weight",
    "ffn_out.bias",
];

impl<V> LayerParams<V> {
    fn into_vec(self) -> Vec<V> {
        vec![
            self.q_weight,
            self.q_bias,
            self.k_weight,
            self.k_bias,
            self.v_weight,
            self.v_bias,
            self.out_weight,
            self.out_bias,
            self.attn_norm_gain,
            self.attn_norm_bias,
            self.ffn_norm_gain,
            self.ffn_norm_bias,
            self.ffn_in_weight,
            self.ffn_in_bias,
            self.ffn_out_weight,
            self.ffn_out_bias,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = V>) -> Option<Self> {
        Some(Self {
            q_weight: it.next()?,
            q_bias: it.next()?,
            k_weight: it.next()?,
            k_bias: it.next()?,
            v_weight: it.next()?,
            v_bias: it.next()?,
            out_weight: it.next()?,
            out_bias: it.next()?,
            attn_norm_gain: it.next()?,
            attn_norm_bias: it.next()?,
            ffn_norm_gain: it.next()?,
            ffn_norm_bias: it.next()?,
            ffn_in_weight: it.next()?,
            ffn_in_bias: it.next()?,
            ffn_out_weight: it.next()?,
            ffn_out_bias: it.next()?,
        })
    }
}

/// All learnable parameters of one encoder, generic over the value type so
/// the same structure holds tensors or graph nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<V> {
    pub input_weight: V,
    pub input_bias: V,
    pub layers: Vec<LayerParams<V>>,
    pub final_norm_gain: V,
    pub final_norm_bias: V,
}

impl<V> Params<V> {
    /// Flattens in canonical order (the order of [`param_names`]).
    pub fn into_vec(self) -> Vec<V> {
        let mut out = vec![self.input_weight, self.input_bias];
        for layer in self.layers {
            out.extend(layer.into_vec());
        }
        out.push(self.final_norm_gain);
        out.push(self.final_norm_bias);
        out
    }

    /// Inverse of [`Params::into_vec`].
    pub fn from_vec(num_layers: usize, values: Vec<V>) -> Result<Self> {
        let expected = 4 + 16 * num_layers;
        if values.len() != expected {
            return Err(StarError::Checkpoint(format!(
                "expected {expected} parameters for {num_layers} layers, got {}",
                values.len()
            )));
        }
        let mut it = values.into_iter();
        let input_weight = it.next().expect("length checked");
        let input_bias = it.next().expect("length checked");
        let layers = (0..num_layers)
            .map(|_| LayerParams::from_iter(&mut it).expect("length checked"))
            .collect();
        Ok(Self {
            input_weight,
            input_bias,
            layers,
            final_norm_gain: it.next().expect("length checked"),
            final_norm_bias: it.next().expect("length checked"),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = &V> {
        let head = [&self.input_weight, &self.input_bias];
        let layers = self.layers.iter().flat_map(|l| {
            [
                &l.q_weight,
                &l.q_bias,
                &l.k_weight,
                &l.k_bias,
                &l.v_weight,
                &l.v_bias,
                &l.out_weight,
                &l.out_bias,
                &l.attn_norm_gain,
                &l.attn_norm_bias,
                &l.ffn_norm_gain,
                &l.ffn_norm_bias,
                &l.ffn_in_weight,
                &l.ffn_in_bias,
                &l.ffn_out_weight,
                &l.ffn_out_bias,
            ]
        });
        head.into_iter()
            .chain(layers)
            .chain([&self.final_norm_gain, &self.final_norm_bias])
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut V> {
        let head = [&mut self.input_weight, &mut self.input_bias];
        let layers = self.layers.iter_mut().flat_map(|l| {
            [
                &mut l.q_weight,
                &mut l.q_bias,
                &mut l.k_weight,
                &mut l.k_bias,
                &mut l.v_weight,
                &mut l.v_bias,
                &mut l.out_weight,
                &mut l.out_bias,
                &mut l.attn_norm_gain,
                &mut l.attn_norm_bias,
                &mut l.ffn_norm_gain,
                &mut l.ffn_norm_bias,
                &mut l.ffn_in_weight,
                &mut l.ffn_in_bias,
                &mut l.ffn_out_weight,
                &mut l.ffn_out_bias,
            ]
        });
        head.into_iter()
            .chain(layers)
            .chain([&mut self.final_norm_gain, &mut self.final_norm_bias])
    }

    pub fn map<U>(&self, mut f: impl FnMut(&V) -> U) -> Params<U> {
        let values: Vec<U> = self.iter().map(&mut f).collect();
        Params::from_vec(self.layers.len(), values).expect("same layout")
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&V) -> Result<U>) -> Result<Params<U>> {
        let values = self.iter().map(&mut f).collect::<Result<Vec<U>>>()?;
        Params::from_vec(self.layers.len(), values)
    }

    pub fn zip_map<W, U>(&self, other: &Params<W>, mut f: impl FnMut(&V, &W) -> U) -> Params<U> {
        assert_eq!(self.layers.len(), other.layers.len());
        let values: Vec<U> = self.iter().zip(other.iter()).map(|(a, b)| f(a, b)).collect();
        Params::from_vec(self.layers.len(), values).expect("same layout")
    }

    pub fn len(&self) -> usize {
        4 + 16 * self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl Params<Tensor> {
    /// Registers every parameter as a trainable leaf of `graph`.
    pub fn to_leaves(&self, graph: &mut Graph) -> Params<NodeId> {
        self.map(|t| graph.leaf(t.clone()))
    }

    pub fn num_scalars(&self) -> usize {
        self.iter().map(Tensor::numel).sum()
    }

    /// Euclidean norm over all entries, accumulated in canonical order.
    pub fn global_norm(&self) -> f64 {
        let mut sq = 0.0;
        for t in self.iter() {
            for v in t.data() {
                sq += v * v;
            }
        }
        sq.sqrt()
    }

    pub fn bit_eq(&self, other: &Params<Tensor>) -> bool {
        self.layers.len() == other.layers.len()
            && self.iter().zip(other.iter()).all(|(a, b)| a.bit_eq(b))
    }
}

/// Stable parameter names in canonical order, e.g. `layer.3.q_proj.weight`.
pub fn param_names(num_layers: usize) -> Vec<String> {
    let mut names = vec!["input_proj.weight".to_string(), "input_proj.bias".to_string()];
    for l in 0..num_layers {
        names.extend(LAYER_SUFFIXES.iter().map(|s| format!("layer.{l}.{s}")));
    }
    names.push("final_norm.gain".into());
    names.push("final_norm.bias".into());
    names
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    /// uniform(±1/sqrt(fan_in)), fan_in = shape[1]
    Linear,
    Zeros,
    Ones,
}

fn layout(cfg: &ModelConfig) -> Vec<(Vec<usize>, Init)> {
    let (d, f) = (cfg.width, cfg.ffn_width);
    let mut out = vec![(vec![d, cfg.input_dim], Init::Linear), (vec![d], Init::Zeros)];
    for _ in 0..cfg.num_layers {
        for _ in 0..4 {
            out.push((vec![d, d], Init::Linear));
            out.push((vec![d], Init::Zeros));
        }
        for _ in 0..2 {
            out.push((vec![d], Init::Ones));
            out.push((vec![d], Init::Zeros));
        }
        out.push((vec![f, d], Init::Linear));
        out.push((vec![f], Init::Zeros));
        out.push((vec![d, f], Init::Linear));
        out.push((vec![d], Init::Zeros));
    }
    out.push((vec![d], Init::Ones));
    out.push((vec![d], Init::Zeros));
    out
}

/// Shape of every parameter in canonical order.
pub fn expected_shapes(cfg: &ModelConfig) -> Vec<Vec<usize>> {
    layout(cfg).into_iter().map(|(s, _)| s).collect()
}

/// A config together with a full set of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub params: Params<Tensor>,
}

impl ModelWeights {
    /// Seeded initialization: linear weights uniform in ±1/sqrt(fan_in),
    /// biases zero, norm gains one. Weights are drawn as f32 so that a
    /// checkpoint round trip is lossless.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let values = layout(config)
            .into_iter()
            .map(|(shape, init)| match init {
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::ones(&shape),
                Init::Linear => {
                    let bound = 1.0 / (shape[1] as f32).sqrt();
                    let numel = shape.iter().product();
                    let data = (0..numel)
                        .map(|_| rng.random_range(-bound..bound) as f64)
                        .collect();
                    Tensor::new(shape, data).expect("layout shapes are valid")
                }
            })
            .collect();
        let params = Params::from_vec(config.num_layers, values)?;
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Params<Tensor>) -> Result<Self> {
        config.validate()?;
        let w = Self { config, params };
        w.audit()?;
        Ok(w)
    }

    /// Verifies that every parameter has the shape the config implies.
    pub fn audit(&self) -> Result<()> {
        self.config.validate()?;
        if self.params.layers.len() != self.config.num_layers {
            return Err(StarError::Checkpoint(format!(
                "config has {} layers, parameters have {}",
                self.config.num_layers,
                self.params.layers.len()
            )));
        }
        let names = param_names(self.config.num_layers);
        for ((name, expected), t) in names
            .iter()
            .zip(expected_shapes(&self.config))
            .zip(self.params.iter())
        {
            if t.shape() != expected.as_slice() {
                return Err(StarError::Checkpoint(format!(
                    "{name} has shape {:?}, expected {expected:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Rounds every parameter to the nearest f32, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        self.params = self.params.map(|t| t.map(|v| v as f32 as f64));
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }
}
