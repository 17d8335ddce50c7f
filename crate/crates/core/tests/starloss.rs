use proptest::prelude::*;
use star_core::model::{forward_diff, forward_with_trace, ForwardTrace, ModelConfig, ModelWeights};
use star_core::numerics::{ops, Backend, Eager, Graph, NodeId, Tensor};
use star_core::oracle::{self, max_gradient_error, numeric_gradient, random_orthogonal, random_tensor};
use star_core::starloss::{
    channel_gram, evaluate, intra_tgm, loss_avg_attn, loss_intra_layer, loss_layer_wise, star_loss,
    star_loss_diff, tgm, LossTerm, SeqNormalization, StarLossConfig, TgmNormalization,
};
use star_core::StarError;

fn literal(terms: &[LossTerm]) -> StarLossConfig {
    StarLossConfig::with_terms(terms).paper_literal()
}

/// Trace with random features of width `d` and random attention maps.
fn synthetic_trace(layers: usize, d: usize, heads: usize, n: usize, seed: u64) -> ForwardTrace<Tensor> {
    let features: Vec<Tensor> = (0..=layers)
        .map(|l| random_tensor(d, n, -2.0, 2.0, seed * 101 + l as u64))
        .collect();
    let attn_maps = (0..layers)
        .map(|l| {
            (0..heads)
                .map(|h| {
                    let logits = random_tensor(n, n, -3.0, 3.0, seed * 211 + (l * 17 + h) as u64);
                    ops::softmax_rows(&logits).unwrap()
                })
                .collect()
        })
        .collect();
    ForwardTrace {
        output: Tensor::zeros(&[d, n]),
        features,
        attn_maps,
        seq_len: n,
    }
}

fn model_pair(dt: usize, ds: usize, seed: u64) -> (ModelWeights, ModelWeights) {
    let base = ModelConfig {
        num_layers: 2,
        width: dt,
        num_heads: 2,
        ffn_width: 2 * dt,
        input_dim: 3,
        seed,
        post_ln: false,
    };
    let student = ModelConfig {
        width: ds,
        ffn_width: 2 * ds,
        seed: seed + 1,
        ..base.clone()
    };
    (ModelWeights::init(&base).unwrap(), ModelWeights::init(&student).unwrap())
}

#[test]
fn width_independence_without_projection_parameters() {
    let (teacher, student) = model_pair(12, 6, 3);
    let x = random_tensor(3, 5, -2.0, 2.0, 4);
    let t = forward_with_trace(&teacher, &x).unwrap();
    let s = forward_with_trace(&student, &x).unwrap();
    for cfg in [StarLossConfig::default(), literal(&LossTerm::ALL)] {
        let b = evaluate(&cfg, &t, &s).unwrap();
        assert!(b.total.is_finite() && b.total > 0.0);
    }
    let mut g = Graph::new();
    let leaves = student.params.to_leaves(&mut g);
    let xi = g.constant(x);
    let st = forward_diff(&mut g, &student.config, &leaves, xi).unwrap();
    let before = g.leaf_count();
    star_loss_diff(&mut g, &literal(&LossTerm::ALL), &t, &st).unwrap();
    assert_eq!(g.leaf_count(), before);
}

#[test]
fn head_count_may_differ() {
    let t = synthetic_trace(2, 4, 4, 5, 1);
    let s = synthetic_trace(2, 4, 1, 5, 2);
    let v = loss_avg_attn(&mut Eager, &literal(&[LossTerm::AvgAttn]), &t, &s).unwrap();
    assert!(v.value.item().is_finite() && v.value.item() > 0.0);
    assert_eq!(v.per_layer.len(), 2);
}

#[test]
fn misaligned_traces_rejected() {
    let t = synthetic_trace(2, 4, 2, 5, 1);
    let shorter = synthetic_trace(2, 4, 2, 4, 2);
    let shallower = synthetic_trace(1, 4, 2, 5, 3);
    let cfg = literal(&LossTerm::ALL);
    match evaluate(&cfg, &t, &shallower) {
        Err(StarError::Alignment { teacher: 2, student: 1, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
    match evaluate(&cfg, &t, &shorter) {
        Err(StarError::Alignment { teacher: 5, student: 4, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn losses_invariant_under_shared_orthogonal_map() {
    for seed in 0..20 {
        let d = 1 + seed as usize % 6;
        let t = synthetic_trace(2, d, 2, 5, seed);
        let s = synthetic_trace(2, d, 2, 5, seed + 100);
        let q = random_orthogonal(d, seed);
        let rotated = ForwardTrace {
            features: t.features.iter().map(|f| ops::matmul(&q, f).unwrap()).collect(),
            ..t.clone()
        };
        for term in [LossTerm::LayerWise, LossTerm::IntraLayer] {
            let cfg = literal(&[term]);
            let a = evaluate(&cfg, &t, &s).unwrap().total;
            let b = evaluate(&cfg, &rotated, &s).unwrap().total;
            assert!((a - b).abs() <= 1e-7 * a.max(1.0), "{}: {a} vs {b}", term.name());
        }
        // teacher = Q * student at every layer
        let student_rot = ForwardTrace {
            features: s.features.iter().map(|f| ops::matmul(&q, f).unwrap()).collect(),
            ..s.clone()
        };
        let v = loss_layer_wise(&mut Eager, &literal(&[LossTerm::LayerWise]), &student_rot, &s).unwrap();
        assert!(v.value.item().abs() < 1e-7);
    }
}

#[test]
fn channel_gram_is_transposed_tgm() {
    let f = random_tensor(3, 5, -2.0, 2.0, 8);
    let ft = ops::transpose(&f).unwrap();
    let a = channel_gram(&f).unwrap();
    let b = tgm(&mut Eager, &ft, TgmNormalization::None).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn normalizations_are_exact_factors() {
    let (l, d, n) = (3usize, 4usize, 5usize);
    let t = synthetic_trace(l, d, 2, n, 5);
    let s = synthetic_trace(l, d, 3, n, 6);
    let plain = evaluate(&literal(&LossTerm::ALL), &t, &s).unwrap();
    let mut steps = literal(&LossTerm::ALL);
    steps.seq_normalization = SeqNormalization::BySteps;
    let by_steps = evaluate(&steps, &t, &s).unwrap();
    let factors = [(LossTerm::AvgAttn, l * n), (LossTerm::LayerWise, (l + 1) * n * n), (LossTerm::IntraLayer, l * n * n)];
    for (term, factor) in factors {
        let want = plain.term(term).unwrap() * (1.0 / factor as f64);
        assert_eq!(by_steps.term(term).unwrap().to_bits(), want.to_bits(), "{}", term.name());
    }
    // channel normalization divides each Gram by d, so the squared distance by d^2
    let mut chan = literal(&[LossTerm::LayerWise]);
    chan.tgm_normalization = TgmNormalization::ByChannels;
    let by_chan = evaluate(&chan, &t, &s).unwrap().total;
    let lw = plain.term(LossTerm::LayerWise).unwrap();
    assert!((by_chan * (d * d) as f64 - lw).abs() <= 1e-12 * lw);
}

#[test]
fn ablation_total_is_sum_of_remaining_terms() {
    let t = synthetic_trace(2, 5, 2, 4, 9);
    let s = synthetic_trace(2, 3, 1, 4, 10);
    let mut cfg = StarLossConfig::with_terms(&LossTerm::ALL);
    cfg.weight_avg_attn = 0.3;
    cfg.weight_layer_wise = 2.0;
    cfg.weight_intra_layer = 0.5;
    let full = evaluate(&cfg, &t, &s).unwrap();
    for off in LossTerm::ALL {
        let mut c = cfg.clone();
        match off {
            LossTerm::AvgAttn => c.enable_avg_attn = false,
            LossTerm::LayerWise => c.enable_layer_wise = false,
            LossTerm::IntraLayer => c.enable_intra_layer = false,
        }
        let b = evaluate(&c, &t, &s).unwrap();
        let expected: f64 = LossTerm::ALL
            .iter()
            .filter(|&&term| term != off)
            .map(|&term| c.weight(term) * full.term(term).unwrap())
            .sum();
        assert!((b.total - expected).abs() <= 1e-12 * expected.max(1.0));
        assert!(b.term(off).is_none());
    }
}

/// Gradient of the loss with respect to student features and maps, through
/// the graph, against central differences on the same quantities.
#[test]
fn loss_gradients_wrt_student_features() {
    let t = synthetic_trace(2, 4, 2, 3, 11);
    let s = synthetic_trace(2, 3, 1, 3, 12);
    let student_logits: Vec<Tensor> = (0..2).map(|l| random_tensor(3, 3, -2.0, 2.0, 300 + l)).collect();
    let mut cfgs: Vec<StarLossConfig> = LossTerm::ALL.iter().map(|t| literal(&[*t])).collect();
    cfgs.push(StarLossConfig::with_terms(&LossTerm::ALL));
    for cfg in cfgs {
        // parameters: the 3 features then the 2 attention logits
        let params: Vec<Tensor> = s.features.iter().cloned().chain(student_logits.iter().cloned()).collect();
        let build = |g: &mut Graph, ps: &[Tensor]| -> (Vec<NodeId>, NodeId) {
            let ids: Vec<NodeId> = ps.iter().map(|p| g.leaf(p.clone())).collect();
            let maps: Vec<Vec<NodeId>> = ids[3..].iter().map(|id| vec![g.softmax_rows(id).unwrap()]).collect();
            let trace = ForwardTrace {
                features: ids[..3].to_vec(),
                attn_maps: maps,
                output: ids[2],
                seq_len: 3,
            };
            let loss = star_loss_diff(g, &cfg, &t, &trace).unwrap();
            (ids, loss.total)
        };
        let mut g = Graph::new();
        let (ids, root) = build(&mut g, &params);
        g.backward(root).unwrap();
        let analytic: Vec<Tensor> = ids.iter().map(|&id| g.grad_or_zeros(id)).collect();
        let numeric = numeric_gradient(
            |ps| {
                let mut g = Graph::new();
                let (_, root) = build(&mut g, ps);
                g.get(root).item()
            },
            &params,
            oracle::DEFAULT_STEP,
        );
        let err = max_gradient_error(&analytic, &numeric);
        assert!(err < oracle::GRAD_REL_TOL, "{:?}: {err:e}", cfg.enabled_terms());
    }
}

#[test]
fn doubling_weights_doubles_total_and_keeps_direction() {
    let (teacher, student) = model_pair(8, 4, 20);
    let x = random_tensor(3, 5, -2.0, 2.0, 21);
    let t = forward_with_trace(&teacher, &x).unwrap();
    let cfg = StarLossConfig::with_terms(&LossTerm::ALL);
    let mut doubled = cfg.clone();
    doubled.weight_avg_attn *= 2.0;
    doubled.weight_layer_wise *= 2.0;
    doubled.weight_intra_layer *= 2.0;
    let a = oracle::backward_gradients(&cfg, &t, &student, &x).unwrap();
    let b = oracle::backward_gradients(&doubled, &t, &student, &x).unwrap();
    let s = forward_with_trace(&student, &x).unwrap();
    let (la, lb) = (evaluate(&cfg, &t, &s).unwrap().total, evaluate(&doubled, &t, &s).unwrap().total);
    assert!((lb - 2.0 * la).abs() <= 1e-12 * lb);
    let flat = |v: &[Tensor]| v.iter().flat_map(|t| t.data().to_vec()).collect::<Vec<f64>>();
    let (fa, fb) = (flat(&a), flat(&b));
    let dot: f64 = fa.iter().zip(&fb).map(|(x, y)| x * y).sum();
    let na = fa.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = fb.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((dot / (na * nb) - 1.0).abs() < 1e-9);
}

#[test]
fn eager_and_graph_losses_agree_bitwise() {
    let t = synthetic_trace(2, 4, 2, 4, 30);
    let s = synthetic_trace(2, 3, 2, 4, 31);
    let cfg = StarLossConfig::with_terms(&LossTerm::ALL);
    let eager = star_loss(&mut Eager, &cfg, &t, &s).unwrap().breakdown;
    let mut g = Graph::new();
    let sn = s.map(|x| g.leaf(x.clone()));
    let diff = star_loss_diff(&mut g, &cfg, &t, &sn).unwrap().breakdown;
    assert_eq!(eager.total.to_bits(), diff.total.to_bits());
    assert_eq!(eager, diff);
    let json: serde_json::Value = serde_json::from_str(&eager.to_json()).unwrap();
    assert_eq!(json["config_digest"], cfg.digest());
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, usize, u64)> {
    (1usize..=3, 1usize..=8, 1usize..=4, 1usize..=6, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fast_paths_match_oracles((l, d, h, n, seed) in dims(), ds in 1usize..=8, hs in 1usize..=4) {
        let t = synthetic_trace(l, d, h, n, seed % 10_000);
        let s = synthetic_trace(l, ds, hs, n, seed % 10_000 + 7);
        let b = evaluate(&literal(&LossTerm::ALL), &t, &s).unwrap();
        prop_assert!((b.terms.avg_attn.unwrap() - oracle::naive_avg_attn_loss(&t, &s)).abs() <= 1e-9);
        prop_assert!((b.terms.layer_wise.unwrap() - oracle::naive_layer_wise_loss(&t, &s)).abs() <= 1e-9);
        prop_assert!((b.terms.intra_layer.unwrap() - oracle::naive_intra_layer_loss(&t, &s)).abs() <= 1e-9);
        for f in &t.features {
            let g = tgm(&mut Eager, f, TgmNormalization::None).unwrap();
            prop_assert!(g.max_abs_diff(&oracle::naive_tgm(f)) <= 1e-9);
            prop_assert!(channel_gram(f).unwrap().max_abs_diff(&oracle::naive_channel_gram(f)) <= 1e-9);
        }
        let gi = intra_tgm(&mut Eager, &t.features[0], &t.features[1], TgmNormalization::None).unwrap();
        prop_assert!(gi.max_abs_diff(&oracle::naive_intra_tgm(&t.features[0], &t.features[1])) <= 1e-9);
    }

    #[test]
    fn self_distillation_is_exactly_zero((l, d, h, n, seed) in dims(), literal_norm in any::<bool>()) {
        let t = synthetic_trace(l, d, h, n, seed % 10_000);
        let mut cfg = StarLossConfig::with_terms(&LossTerm::ALL);
        if literal_norm {
            cfg = cfg.paper_literal();
        }
        let b = evaluate(&cfg, &t, &t).unwrap();
        prop_assert_eq!(b.total, 0.0);
        prop_assert_eq!(loss_intra_layer(&mut Eager, &cfg, &t, &t).unwrap().value.item(), 0.0);
    }

    #[test]
    fn tgm_symmetric_psd_and_rotation_invariant(d in 1usize..=8, n in 1usize..=6, seed in 0u64..100_000) {
        let f = random_tensor(d, n, -2.0, 2.0, seed);
        let g = tgm(&mut Eager, &f, TgmNormalization::ByChannels).unwrap();
        prop_assert!(g.max_abs_diff(&ops::transpose(&g).unwrap()) <= 1e-12);
        let v = random_tensor(n, 1, -1.0, 1.0, seed + 1);
        let gv = ops::matmul(&g, &v).unwrap();
        let quad: f64 = v.data().iter().zip(gv.data()).map(|(a, b)| a * b).sum();
        prop_assert!(quad >= -1e-9);
        let q = random_orthogonal(d, seed + 2);
        let gq = tgm(&mut Eager, &ops::matmul(&q, &f).unwrap(), TgmNormalization::ByChannels).unwrap();
        prop_assert!(g.max_abs_diff(&gq) <= 1e-7);
    }

    #[test]
    fn duplicating_student_heads_is_invisible((l, d, h, n, seed) in dims()) {
        let t = synthetic_trace(l, d, h, n, seed % 10_000);
        let s = synthetic_trace(l, d, h, n, seed % 10_000 + 3);
        let mut dup = s.clone();
        for maps in &mut dup.attn_maps {
            let copy = maps.clone();
            maps.extend(copy);
        }
        let cfg = literal(&[LossTerm::AvgAttn]);
        let a = loss_avg_attn(&mut Eager, &cfg, &t, &s).unwrap().value.item();
        let b = loss_avg_attn(&mut Eager, &cfg, &t, &dup).unwrap().value.item();
        prop_assert!((a - b).abs() <= 1e-9);
        prop_assert!(a >= -1e-9);
    }
}
