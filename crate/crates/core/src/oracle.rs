//! Slow reference implementations and numeric checkers.
//!
//! Nothing here calls the fast kernels for the quantity it checks: Gram
//! matrices and loss sums are literal index loops over the printed
//! summation indices, and gradients are central differences.
//!
//! Central differences with `h = 1e-5` in f64: truncation error is
//! `O(h^2 f''') ~ 1e-10` and cancellation error is `O(eps |f| / h) ~ 1e-11 |f|`,
//! both far below the `1e-4` relative tolerance used against backward.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::Serialize;

use crate::error::Result;
use crate::model::{forward_diff, forward_with_trace, ForwardTrace, ModelConfig, ModelWeights, Params};
use crate::numerics::{Graph, Tensor};
use crate::starloss::{evaluate, star_loss_diff, LossTerm, StarLossConfig};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;
pub const GRAD_ABS_FLOOR: f64 = 1e-7;

fn dims(f: &Tensor) -> (usize, usize) {
    (f.shape()[0], f.shape()[1])
}

/// `G[i][j] = sum_k F[k][i] F[k][j]`, unnormalized.
pub fn naive_tgm(f: &Tensor) -> Tensor {
    let (d, n) = dims(f);
    let x = f.data();
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..d {
                s += x[k * n + i] * x[k * n + j];
            }
            g[i * n + j] = s;
        }
    }
    Tensor::matrix(n, n, g).expect("square")
}

/// `G[i][j] = sum_k P[k][i] C[k][j]`, unnormalized.
pub fn naive_intra_tgm(f_prev: &Tensor, f_cur: &Tensor) -> Tensor {
    let (d, n) = dims(f_prev);
    assert_eq!(f_prev.shape(), f_cur.shape());
    let (p, c) = (f_prev.data(), f_cur.data());
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..d {
                s += p[k * n + i] * c[k * n + j];
            }
            g[i * n + j] = s;
        }
    }
    Tensor::matrix(n, n, g).expect("square")
}

/// `G[i][j] = sum_k F[i][k] F[j][k]`.
pub fn naive_channel_gram(f: &Tensor) -> Tensor {
    let (d, n) = dims(f);
    let x = f.data();
    let mut g = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..n {
                s += x[i * n + k] * x[j * n + k];
            }
            g[i * d + j] = s;
        }
    }
    Tensor::matrix(d, d, g).expect("square")
}

/// Single-head attention map `softmax(q^T k / sqrt(d))` for `d x N`
/// queries and keys, one row at a time.
pub fn naive_attention_map(q: &Tensor, k: &Tensor) -> Tensor {
    let (d, n) = (q.shape()[0], q.shape()[1]);
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let mut logits = vec![0.0; n];
        for (j, l) in logits.iter_mut().enumerate() {
            for c in 0..d {
                *l += q.get2(c, i) * k.get2(c, j);
            }
            *l *= scale;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for l in &logits {
            z += (l - max).exp();
        }
        for j in 0..n {
            out[i * n + j] = (logits[j] - max).exp() / z;
        }
    }
    Tensor::matrix(n, n, out).expect("finite")
}

/// `sum_l sum_t KL(mean_h A^T[l][h][t] || mean_h A^S[l][h][t])`.
pub fn naive_avg_attn_loss(teacher: &ForwardTrace<Tensor>, student: &ForwardTrace<Tensor>) -> f64 {
    let n = teacher.seq_len;
    let mut total = 0.0;
    for l in 0..teacher.attn_maps.len() {
        let (th, sh) = (&teacher.attn_maps[l], &student.attn_maps[l]);
        for t in 0..n {
            for j in 0..n {
                let mut p = 0.0;
                for a in th {
                    p += a.data()[t * n + j];
                }
                p /= th.len() as f64;
                let mut q = 0.0;
                for a in sh {
                    q += a.data()[t * n + j];
                }
                q /= sh.len() as f64;
                if p > 0.0 {
                    total += p * (p / q.max(1e-12)).ln();
                }
            }
        }
    }
    total
}

fn naive_sq_dist(a: &Tensor, b: &Tensor) -> f64 {
    let mut s = 0.0;
    for i in 0..a.numel() {
        let d = a.data()[i] - b.data()[i];
        s += d * d;
    }
    s
}

/// `sum_{l=0..L} ||G(F^l_T) - G(F^l_S)||^2` with unnormalized Grams.
pub fn naive_layer_wise_loss(teacher: &ForwardTrace<Tensor>, student: &ForwardTrace<Tensor>) -> f64 {
    let mut total = 0.0;
    for l in 0..teacher.features.len() {
        total += naive_sq_dist(&naive_tgm(&teacher.features[l]), &naive_tgm(&student.features[l]));
    }
    total
}

/// `sum_{l=1..L} ||G(F^(l-1)_T, F^l_T) - G(F^(l-1)_S, F^l_S)||^2`.
pub fn naive_intra_layer_loss(teacher: &ForwardTrace<Tensor>, student: &ForwardTrace<Tensor>) -> f64 {
    let mut total = 0.0;
    for l in 1..teacher.features.len() {
        let gt = naive_intra_tgm(&teacher.features[l - 1], &teacher.features[l]);
        let gs = naive_intra_tgm(&student.features[l - 1], &student.features[l]);
        total += naive_sq_dist(&gt, &gs);
    }
    total
}

/// Central-difference gradient of `f` with respect to every entry of every
/// tensor in `params`.
pub fn numeric_gradient<F>(mut f: F, params: &[Tensor], h: f64) -> Vec<Tensor>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut work = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].numel()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let plus = f(&work);
            work[p].data_mut()[i] = orig - h;
            let minus = f(&work);
            work[p].data_mut()[i] = orig;
            *gi = (plus - minus) / (2.0 * h);
        }
        grads.push(Tensor::new(params[p].shape().to_vec(), g).expect("finite gradient"));
    }
    grads
}

/// Disagreement between two gradient entries: 0 when within the absolute
/// floor, relative error otherwise.
pub fn gradient_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= GRAD_ABS_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

pub fn max_gradient_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(&a, &n)| gradient_error(a, n))
        .fold(0.0, f64::max)
}

/// Seeded `d x d` orthogonal matrix: modified Gram-Schmidt on a Gaussian
/// matrix, columns orthonormalized in order.
pub fn random_orthogonal(d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut cols: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let mut ok = true;
        for j in 0..d {
            for _pass in 0..2 {
                for i in 0..j {
                    let dot: f64 = (0..d).map(|k| cols[i][k] * cols[j][k]).sum();
                    let (done, rest) = cols.split_at_mut(j);
                    for (c, p) in rest[0].iter_mut().zip(&done[i]) {
                        *c -= dot * p;
                    }
                }
            }
            let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for v in &mut cols[j] {
                *v /= norm;
            }
        }
        if ok {
            let mut data = vec![0.0; d * d];
            for (j, col) in cols.iter().enumerate() {
                for (i, &v) in col.iter().enumerate() {
                    data[i * d + j] = v;
                }
            }
            return Tensor::matrix(d, d, data).expect("square");
        }
    }
}

/// Determinant by Gaussian elimination with partial pivoting.
pub fn determinant(m: &Tensor) -> f64 {
    let n = m.shape()[0];
    let mut a = m.data().to_vec();
    let mut det = 1.0;
    for c in 0..n {
        let pivot = (c..n)
            .max_by(|&x, &y| a[x * n + c].abs().total_cmp(&a[y * n + c].abs()))
            .expect("non-empty range");
        if a[pivot * n + c] == 0.0 {
            return 0.0;
        }
        if pivot != c {
            for k in 0..n {
                a.swap(c * n + k, pivot * n + k);
            }
            det = -det;
        }
        det *= a[c * n + c];
        for r in c + 1..n {
            let f = a[r * n + c] / a[c * n + c];
            for k in c..n {
                a[r * n + k] -= f * a[c * n + k];
            }
        }
    }
    det
}

/// Seeded `rows x cols` tensor with entries uniform in `[lo, hi)`.
pub fn random_tensor(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Uniform::new(lo, hi).expect("valid range");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| u.sample(&mut rng)).collect())
        .expect("finite")
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub term: String,
    pub parameters: usize,
    pub scalars: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub checks: Vec<GradCheckEntry>,
    pub pass: bool,
}

/// Shapes used by [`grad_check_suite`]: a 2-block teacher of width 8 and a
/// 2-block student of width 6, sequence length 5.
pub fn grad_check_models(seed: u64) -> (ModelConfig, ModelConfig, usize) {
    let teacher = ModelConfig {
        num_layers: 2,
        width: 8,
        num_heads: 4,
        ffn_width: 12,
        input_dim: 4,
        seed: seed.wrapping_mul(2).wrapping_add(1),
        post_ln: false,
    };
    let student = ModelConfig {
        num_layers: 2,
        width: 6,
        num_heads: 2,
        ffn_width: 8,
        input_dim: 4,
        seed: seed.wrapping_mul(2).wrapping_add(2),
        post_ln: false,
    };
    (teacher, student, 5)
}

/// Backward vs. central differences over every student parameter, for each
/// loss term alone and for their combination.
pub fn grad_check_suite(seed: u64) -> Result<GradCheckReport> {
    let (tc, sc, n) = grad_check_models(seed);
    let teacher = ModelWeights::init(&tc)?;
    let student = ModelWeights::init(&sc)?;
    let input = random_tensor(tc.input_dim, n, -2.0, 2.0, seed ^ 0x5eed);
    let t_trace = forward_with_trace(&teacher, &input)?;

    let mut cases: Vec<(String, StarLossConfig)> = LossTerm::ALL
        .iter()
        .map(|t| (t.name().to_string(), StarLossConfig::with_terms(&[*t])))
        .collect();
    let mut combined = StarLossConfig::with_terms(&LossTerm::ALL);
    combined.weight_avg_attn = 0.7;
    combined.weight_intra_layer = 1.3;
    cases.push(("combined".into(), combined.clone()));
    cases.push(("combined_unnormalized".into(), combined.paper_literal()));
    cases.push(("default".into(), StarLossConfig::default()));

    let mut checks = Vec::new();
    for (name, cfg) in cases {
        let analytic = backward_gradients(&cfg, &t_trace, &student, &input)?;
        let flat: Vec<Tensor> = student.params.iter().cloned().collect();
        let numeric = numeric_gradient(
            |ps| {
                let params = Params::from_vec(sc.num_layers, ps.to_vec()).expect("layout");
                let w = ModelWeights { config: sc.clone(), params };
                let s_trace = forward_with_trace(&w, &input).expect("forward");
                evaluate(&cfg, &t_trace, &s_trace).expect("loss").total
            },
            &flat,
            DEFAULT_STEP,
        );
        let err = max_gradient_error(&analytic, &numeric);
        checks.push(GradCheckEntry {
            term: name,
            parameters: flat.len(),
            scalars: flat.iter().map(Tensor::numel).sum(),
            max_rel_err: err,
            pass: err < GRAD_REL_TOL,
        });
    }
    let pass = checks.iter().all(|c| c.pass);
    Ok(GradCheckReport {
        seed,
        step: DEFAULT_STEP,
        tolerance: GRAD_REL_TOL,
        checks,
        pass,
    })
}

/// Gradients of the configured loss with respect to every student
/// parameter, in canonical parameter order.
pub fn backward_gradients(
    cfg: &StarLossConfig,
    teacher: &ForwardTrace<Tensor>,
    student: &ModelWeights,
    input: &Tensor,
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let leaves = student.params.to_leaves(&mut g);
    let x = g.constant(input.clone());
    let trace = forward_diff(&mut g, &student.config, &leaves, x)?;
    let loss = star_loss_diff(&mut g, cfg, teacher, &trace)?;
    g.backward(loss.total)?;
    Ok(leaves.iter().map(|id| g.grad_or_zeros(*id)).collect())
}
