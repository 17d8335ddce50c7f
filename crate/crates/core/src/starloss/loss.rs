use serde::{Deserialize, Serialize};

use super::config::{LossTerm, SeqNormalization, StarLossConfig};
use super::gram::{avg_attention, intra_tgm, tgm};
use crate::error::{Result, StarError};
use crate::model::ForwardTrace;
use crate::numerics::{Backend, Eager, Graph, NodeId, Tensor};

/// A summed loss term and its per-layer contributions (already scaled by
/// the sequence normalization).
#[derive(Debug, Clone)]
pub struct TermValue<V> {
    pub value: V,
    pub per_layer: Vec<f64>,
}

/// One value per loss term; absent terms are `None` (`null` in JSON).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PerTerm<T> {
    pub avg_attn: Option<T>,
    pub layer_wise: Option<T>,
    pub intra_layer: Option<T>,
}

impl<T> PerTerm<T> {
    pub fn get(&self, term: LossTerm) -> Option<&T> {
        match term {
            LossTerm::AvgAttn => self.avg_attn.as_ref(),
            LossTerm::LayerWise => self.layer_wise.as_ref(),
            LossTerm::IntraLayer => self.intra_layer.as_ref(),
        }
    }

    pub fn set(&mut self, term: LossTerm, value: T) {
        let slot = match term {
            LossTerm::AvgAttn => &mut self.avg_attn,
            LossTerm::LayerWise => &mut self.layer_wise,
            LossTerm::IntraLayer => &mut self.intra_layer,
        };
        *slot = Some(value);
    }
}

/// Result of evaluating a [`StarLossConfig`] on a teacher/student pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `sum_i weight_i * term_i` over the enabled terms.
    pub total: f64,
    pub terms: PerTerm<f64>,
    pub per_layer: PerTerm<Vec<f64>>,
    pub config_digest: String,
}

impl LossBreakdown {
    /// Element-wise mean, accumulated in slice order.
    pub fn mean(items: &[LossBreakdown]) -> Result<LossBreakdown> {
        let first = items
            .first()
            .ok_or_else(|| StarError::Config("mean of no loss breakdowns".into()))?;
        let n = items.len() as f64;
        let mut out = first.clone();
        out.total = items.iter().map(|b| b.total).sum::<f64>() / n;
        for term in LossTerm::ALL {
            if first.terms.get(term).is_none() {
                continue;
            }
            let v: f64 = items.iter().map(|b| *b.terms.get(term).unwrap_or(&0.0)).sum();
            out.terms.set(term, v / n);
            let len = first.per_layer.get(term).map_or(0, Vec::len);
            let layers = (0..len)
                .map(|l| {
                    items
                        .iter()
                        .map(|b| b.per_layer.get(term).map_or(0.0, |p| p[l]))
                        .sum::<f64>()
                        / n
                })
                .collect();
            out.per_layer.set(term, layers);
        }
        Ok(out)
    }

    pub fn term(&self, term: LossTerm) -> Option<f64> {
        self.terms.get(term).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("breakdown serializes")
    }
}

/// A differentiable total plus its reported breakdown.
#[derive(Debug, Clone)]
pub struct StarLoss<V> {
    pub total: V,
    pub breakdown: LossBreakdown,
}

fn check_alignment<V>(teacher: &ForwardTrace<V>, student: &ForwardTrace<V>) -> Result<()> {
    if teacher.num_layers() != student.num_layers() {
        return Err(StarError::Alignment {
            what: "layer count",
            teacher: teacher.num_layers(),
            student: student.num_layers(),
        });
    }
    if teacher.seq_len != student.seq_len {
        return Err(StarError::Alignment {
            what: "sequence length",
            teacher: teacher.seq_len,
            student: student.seq_len,
        });
    }
    if teacher.num_layers() == 0 {
        return Err(StarError::Config("traces have no layers".into()));
    }
    Ok(())
}

/// Sums per-layer scalars in layer order and applies `1 / factor`.
fn reduce<B: Backend>(
    b: &mut B,
    parts: Vec<B::Value>,
    seq: SeqNormalization,
    factor: usize,
) -> Result<TermValue<B::Value>> {
    let inv = match seq {
        SeqNormalization::None => None,
        SeqNormalization::BySteps => Some(1.0 / factor as f64),
    };
    let per_layer = parts
        .iter()
        .map(|p| b.scalar_of(p) * inv.unwrap_or(1.0))
        .collect();
    let mut it = parts.into_iter();
    let mut acc = it.next().expect("at least one layer");
    for p in it {
        acc = b.add(&acc, &p)?;
    }
    let value = match inv {
        Some(s) => b.scale(&acc, s),
        None => acc,
    };
    Ok(TermValue { value, per_layer })
}

/// KL divergence between head-averaged teacher and student attention maps,
/// teacher first, summed over query rows and blocks. Head counts may differ.
pub fn loss_avg_attn<B: Backend>(
    b: &mut B,
    cfg: &StarLossConfig,
    teacher: &ForwardTrace<B::Value>,
    student: &ForwardTrace<B::Value>,
) -> Result<TermValue<B::Value>> {
    check_alignment(teacher, student)?;
    let layers = teacher.num_layers();
    let first = if cfg.avg_attn_last_layer_only { layers - 1 } else { 0 };
    let mut parts = Vec::with_capacity(layers - first);
    for l in first..layers {
        let t = avg_attention(b, &teacher.attn_maps[l])?;
        let s = avg_attention(b, &student.attn_maps[l])?;
        parts.push(b.kl_div_rows(&t, &s)?);
    }
    let factor = (layers - first) * teacher.seq_len;
    reduce(b, parts, cfg.seq_normalization, factor)
}

/// Squared Frobenius distance between teacher and student temporal Gram
/// matrices of `F^0..F^L`. Channel widths may differ.
pub fn loss_layer_wise<B: Backend>(
    b: &mut B,
    cfg: &StarLossConfig,
    teacher: &ForwardTrace<B::Value>,
    student: &ForwardTrace<B::Value>,
) -> Result<TermValue<B::Value>> {
    check_alignment(teacher, student)?;
    let mut parts = Vec::with_capacity(teacher.features.len());
    for (ft, fs) in teacher.features.iter().zip(&student.features) {
        let gt = tgm(b, ft, cfg.tgm_normalization)?;
        let gs = tgm(b, fs, cfg.tgm_normalization)?;
        parts.push(b.frobenius_sq_diff(&gt, &gs)?);
    }
    let n = teacher.seq_len;
    reduce(b, parts, cfg.seq_normalization, teacher.features.len() * n * n)
}

/// Squared Frobenius distance between teacher and student cross Grams of
/// each block's input `F^(l-1)` and output `F^l`, `l = 1..L`.
pub fn loss_intra_layer<B: Backend>(
    b: &mut B,
    cfg: &StarLossConfig,
    teacher: &ForwardTrace<B::Value>,
    student: &ForwardTrace<B::Value>,
) -> Result<TermValue<B::Value>> {
    check_alignment(teacher, student)?;
    let layers = teacher.num_layers();
    let mut parts = Vec::with_capacity(layers);
    for l in 1..=layers {
        let gt = intra_tgm(b, &teacher.features[l - 1], &teacher.features[l], cfg.tgm_normalization)?;
        let gs = intra_tgm(b, &student.features[l - 1], &student.features[l], cfg.tgm_normalization)?;
        parts.push(b.frobenius_sq_diff(&gt, &gs)?);
    }
    let n = teacher.seq_len;
    reduce(b, parts, cfg.seq_normalization, layers * n * n)
}

/// Evaluates every enabled term and their weighted sum.
pub fn star_loss<B: Backend>(
    b: &mut B,
    cfg: &StarLossConfig,
    teacher: &ForwardTrace<B::Value>,
    student: &ForwardTrace<B::Value>,
) -> Result<StarLoss<B::Value>> {
    cfg.validate()?;
    check_alignment(teacher, student)?;
    let mut terms = PerTerm::default();
    let mut per_layer = PerTerm::default();
    let mut total: Option<B::Value> = None;
    for term in cfg.enabled_terms() {
        let tv = match term {
            LossTerm::AvgAttn => loss_avg_attn(b, cfg, teacher, student)?,
            LossTerm::LayerWise => loss_layer_wise(b, cfg, teacher, student)?,
            LossTerm::IntraLayer => loss_intra_layer(b, cfg, teacher, student)?,
        };
        terms.set(term, b.scalar_of(&tv.value));
        per_layer.set(term, tv.per_layer);
        let weighted = b.scale(&tv.value, cfg.weight(term));
        total = Some(match total {
            None => weighted,
            Some(acc) => b.add(&acc, &weighted)?,
        });
    }
    let total = total.expect("validated: at least one term");
    let breakdown = LossBreakdown {
        total: b.scalar_of(&total),
        terms,
        per_layer,
        config_digest: cfg.digest(),
    };
    Ok(StarLoss { total, breakdown })
}

/// [`star_loss`] on plain tensors.
pub fn evaluate(
    cfg: &StarLossConfig,
    teacher: &ForwardTrace<Tensor>,
    student: &ForwardTrace<Tensor>,
) -> Result<LossBreakdown> {
    Ok(star_loss(&mut Eager, cfg, teacher, student)?.breakdown)
}

/// [`star_loss`] with a fixed teacher: the teacher trace enters `graph` as
/// constants, so gradients flow only into the student.
pub fn star_loss_diff(
    graph: &mut Graph,
    cfg: &StarLossConfig,
    teacher: &ForwardTrace<Tensor>,
    student: &ForwardTrace<NodeId>,
) -> Result<StarLoss<NodeId>> {
    let teacher = teacher.map(|t| graph.constant(t.clone()));
    star_loss(graph, cfg, &teacher, student)
}
