use super::config::TgmNormalization;
use crate::error::{Result, StarError};
use crate::numerics::{ops, Backend, Tensor};

fn normalize<B: Backend>(b: &mut B, g: B::Value, width: usize, norm: TgmNormalization) -> B::Value {
    match norm {
        TgmNormalization::None => g,
        TgmNormalization::ByChannels => b.scale(&g, 1.0 / width as f64),
    }
}

/// Temporal Gram matrix `G = F^T F` of a `d x N` feature matrix:
/// `G[i][j] = sum_k F[k][i] F[k][j]`, the channel-wise inner product of time
/// steps `i` and `j`. Result is `N x N` whatever `d` is.
pub fn tgm<B: Backend>(b: &mut B, f: &B::Value, norm: TgmNormalization) -> Result<B::Value> {
    let (d, _) = b.value(f).dims2()?;
    let ft = b.transpose(f)?;
    let g = b.matmul(&ft, f)?;
    Ok(normalize(b, g, d, norm))
}

/// Cross Gram `F_prev^T F_cur` between a block's input and output. Entry
/// `(i, j)` relates step `i` before the block to step `j` after it, so the
/// matrix is not symmetric in general.
pub fn intra_tgm<B: Backend>(
    b: &mut B,
    f_prev: &B::Value,
    f_cur: &B::Value,
    norm: TgmNormalization,
) -> Result<B::Value> {
    let (ps, cs) = (b.value(f_prev).shape().to_vec(), b.value(f_cur).shape().to_vec());
    if ps.len() != 2 || ps != cs {
        return Err(StarError::shape("intra_tgm", &ps, &cs));
    }
    let pt = b.transpose(f_prev)?;
    let g = b.matmul(&pt, f_cur)?;
    Ok(normalize(b, g, ps[0], norm))
}

/// Channel ("style") Gram `F F^T`, `d x d`, aggregating over time. Kept as
/// the contrast object to [`tgm`]; no loss uses it.
pub fn channel_gram(f: &Tensor) -> Result<Tensor> {
    ops::matmul(f, &ops::transpose(f)?)
}

/// Element-wise mean of per-head attention maps.
pub fn avg_attention<B: Backend>(b: &mut B, maps: &[B::Value]) -> Result<B::Value> {
    let first = maps
        .first()
        .ok_or_else(|| StarError::InvalidTensor("avg_attention needs at least one head".into()))?;
    let shape = b.value(first).shape().to_vec();
    let mut acc = first.clone();
    for m in &maps[1..] {
        if b.value(m).shape() != shape.as_slice() {
            return Err(StarError::shape("avg_attention", &shape, b.value(m).shape()));
        }
        acc = b.add(&acc, m)?;
    }
    if maps.len() == 1 {
        return Ok(acc);
    }
    Ok(b.scale(&acc, 1.0 / maps.len() as f64))
}
