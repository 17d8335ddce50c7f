//! Acceptance suite. One line per criterion, nonzero exit on any failure.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use star_core::distill::{train_with, DistillConfig, TrainOptions};
use star_core::model::{forward_diff, forward_with_trace, ForwardTrace, ModelConfig, ModelWeights};
use star_core::numerics::{ops, Eager, Graph, Tensor};
use star_core::oracle;
use star_core::starloss::{
    avg_attention, evaluate, intra_tgm, loss_avg_attn, star_loss_diff, tgm, LossTerm,
    SeqNormalization, StarLossConfig, TgmNormalization,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn literal(terms: &[LossTerm]) -> StarLossConfig {
    StarLossConfig::with_terms(terms).paper_literal()
}

/// Random teacher/student pair with equal depth, widths up to 8 and up to
/// 4 heads, and an input of length up to 6.
fn random_pair(rng: &mut ChaCha8Rng) -> (ModelWeights, ModelWeights, Tensor) {
    let layers = rng.random_range(1..=3);
    let input_dim = rng.random_range(1..=4);
    let model = |rng: &mut ChaCha8Rng| {
        let heads = rng.random_range(1..=4);
        let head_dim = rng.random_range(1..=8 / heads);
        let cfg = ModelConfig {
            num_layers: layers,
            width: heads * head_dim,
            num_heads: heads,
            ffn_width: rng.random_range(1..=8),
            input_dim,
            seed: rng.random(),
            post_ln: rng.random_bool(0.25),
        };
        ModelWeights::init(&cfg).expect("valid config")
    };
    let teacher = model(rng);
    let student = model(rng);
    let n = rng.random_range(1..=6);
    let x = oracle::random_tensor(input_dim, n, -2.0, 2.0, rng.random());
    (teacher, student, x)
}

fn traces(t: &ModelWeights, s: &ModelWeights, x: &Tensor) -> (ForwardTrace<Tensor>, ForwardTrace<Tensor>) {
    (
        forward_with_trace(t, x).expect("teacher forward"),
        forward_with_trace(s, x).expect("student forward"),
    )
}

fn formula_fidelity() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (teacher, student, x) = random_pair(&mut rng);
        let (t, s) = traces(&teacher, &student, &x);
        for f in t.features.iter().chain(&s.features) {
            let fast = tgm(&mut Eager, f, TgmNormalization::None).map_err(|e| e.to_string())?;
            worst = worst.max(fast.max_abs_diff(&oracle::naive_tgm(f)));
            let cg = star_core::starloss::channel_gram(f).map_err(|e| e.to_string())?;
            worst = worst.max(cg.max_abs_diff(&oracle::naive_channel_gram(f)));
        }
        for w in t.features.windows(2) {
            let fast = intra_tgm(&mut Eager, &w[0], &w[1], TgmNormalization::None)
                .map_err(|e| e.to_string())?;
            worst = worst.max(fast.max_abs_diff(&oracle::naive_intra_tgm(&w[0], &w[1])));
        }
        let b = evaluate(&literal(&LossTerm::ALL), &t, &s).map_err(|e| e.to_string())?;
        let pairs = [
            (b.terms.avg_attn.unwrap(), oracle::naive_avg_attn_loss(&t, &s)),
            (b.terms.layer_wise.unwrap(), oracle::naive_layer_wise_loss(&t, &s)),
            (b.terms.intra_layer.unwrap(), oracle::naive_intra_layer_loss(&t, &s)),
        ];
        for (fast, naive) in pairs {
            worst = worst.max((fast - naive).abs());
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(worst <= 1e-9, || format!("max abs deviation {worst:e} > 1e-9"))?;
    ensure(secs < 10.0, || format!("took {secs:.2} s"))?;
    Ok(format!("200 instances, max abs deviation {worst:.2e}, {secs:.2} s"))
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let report = oracle::grad_check_suite(0).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    let (_, sc, n) = oracle::grad_check_models(0);
    ensure(
        (sc.num_layers, sc.width, sc.num_heads, sc.ffn_width, n) == (2, 6, 2, 8, 5),
        || format!("unexpected student shape {sc:?}, N={n}"),
    )?;
    let summary: Vec<String> = report
        .checks
        .iter()
        .map(|c| format!("{} {:.1e}", c.term, c.max_rel_err))
        .collect();
    for term in LossTerm::ALL {
        ensure(report.checks.iter().any(|c| c.term == term.name()), || {
            format!("{} not checked", term.name())
        })?;
    }
    ensure(report.pass, || format!("relative error too large: {}", summary.join(", ")))?;
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("{} ({secs:.1} s)", summary.join(", ")))
}

fn algebraic_invariances() -> Outcome {
    let seeds = 100u64;
    let mut orth = 0.0f64;
    let mut sym = 0.0f64;
    let mut psd = f64::INFINITY;
    let mut rows = 0.0f64;
    let mut dup = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let d = rng.random_range(1..=8);
        let n = rng.random_range(1..=6);
        let f = oracle::random_tensor(d, n, -2.0, 2.0, rng.random());
        let f2 = oracle::random_tensor(d, n, -2.0, 2.0, rng.random());
        let q = oracle::random_orthogonal(d, rng.random());
        let qf = ops::matmul(&q, &f).unwrap();
        let qf2 = ops::matmul(&q, &f2).unwrap();
        let g = tgm(&mut Eager, &f, TgmNormalization::None).unwrap();
        orth = orth.max(g.max_abs_diff(&tgm(&mut Eager, &qf, TgmNormalization::None).unwrap()));
        let gi = intra_tgm(&mut Eager, &f, &f2, TgmNormalization::None).unwrap();
        let gqi = intra_tgm(&mut Eager, &qf, &qf2, TgmNormalization::None).unwrap();
        orth = orth.max(gi.max_abs_diff(&gqi));
        sym = sym.max(g.max_abs_diff(&ops::transpose(&g).unwrap()));
        let v = oracle::random_tensor(n, 1, -1.0, 1.0, rng.random());
        let quad = ops::matmul(&ops::transpose(&v).unwrap(), &ops::matmul(&g, &v).unwrap()).unwrap();
        psd = psd.min(quad.data()[0]);

        let (teacher, student, x) = random_pair(&mut rng);
        let (t, s) = traces(&teacher, &student, &x);
        for map in t.attn_maps.iter().chain(&s.attn_maps).flatten() {
            let (r, c) = map.dims2().unwrap();
            for i in 0..r {
                let total: f64 = (0..c).map(|j| map.get2(i, j)).sum();
                rows = rows.max((total - 1.0).abs());
            }
        }
        let mut doubled = s.clone();
        for maps in &mut doubled.attn_maps {
            let copy = maps.clone();
            maps.extend(copy);
        }
        let cfg = literal(&[LossTerm::AvgAttn]);
        let a = loss_avg_attn(&mut Eager, &cfg, &t, &s).unwrap().value.item();
        let b = loss_avg_attn(&mut Eager, &cfg, &t, &doubled).unwrap().value.item();
        dup = dup.max((a - b).abs());

        let mut all = StarLossConfig::with_terms(&LossTerm::ALL);
        if seed % 2 == 0 {
            all = all.paper_literal();
        }
        let zero = evaluate(&all, &t, &t).unwrap();
        for term in LossTerm::ALL {
            let value = zero.term(term).unwrap();
            ensure(value == 0.0, || format!("seed {seed}: self-distillation {} = {value:e}", term.name()))?;
        }
        ensure(zero.total == 0.0, || format!("seed {seed}: self-distillation total {:e}", zero.total))?;
    }
    ensure(orth <= 1e-7, || format!("orthogonal invariance deviation {orth:e}"))?;
    ensure(sym <= 1e-12, || format!("asymmetry {sym:e}"))?;
    ensure(psd >= -1e-9, || format!("negative quadratic form {psd:e}"))?;
    ensure(rows <= 1e-9, || format!("attention row sum deviation {rows:e}"))?;
    ensure(dup <= 1e-9, || format!("head duplication deviation {dup:e}"))?;
    Ok(format!(
        "{seeds} seeds: orthogonal {orth:.1e}, symmetry {sym:.1e}, min xGx {psd:.1e}, rows {rows:.1e}, head dup {dup:.1e}, self 0"
    ))
}

fn width_independence() -> Outcome {
    let base = ModelConfig {
        num_layers: 2,
        width: 16,
        num_heads: 2,
        ffn_width: 32,
        input_dim: 4,
        seed: 11,
        post_ln: false,
    };
    let teacher = ModelWeights::init(&base).unwrap();
    let student = ModelWeights::init(&ModelConfig {
        width: 8,
        ffn_width: 16,
        seed: 12,
        ..base
    })
    .unwrap();
    let x = oracle::random_tensor(4, 7, -2.0, 2.0, 13);
    let t = forward_with_trace(&teacher, &x).unwrap();
    let mut g = Graph::new();
    let leaves = student.params.to_leaves(&mut g);
    let input = g.constant(x.clone());
    let s = forward_diff(&mut g, &student.config, &leaves, input).map_err(|e| e.to_string())?;
    let before = g.leaf_count();
    let cfg = StarLossConfig::with_terms(&LossTerm::ALL);
    let loss = star_loss_diff(&mut g, &cfg, &t, &s).map_err(|e| e.to_string())?;
    let added = g.leaf_count() - before;
    ensure(before == student.params.len(), || format!("{before} leaves for {} parameters", student.params.len()))?;
    ensure(added == 0, || format!("loss path added {added} parameters"))?;
    let total = g.get(loss.total).item();
    ensure(total.is_finite(), || format!("non-finite loss {total}"))?;
    g.backward(loss.total).map_err(|e| e.to_string())?;
    Ok(format!("d 16 vs 8: total {total:.4e}, loss-path parameters {added}"))
}

fn toy_regression() -> Outcome {
    let started = Instant::now();
    let cfg = DistillConfig::toy();
    let a = train_with(&cfg, &TrainOptions::default()).map_err(|e| e.to_string())?;
    let b = train_with(&cfg, &TrainOptions::default()).map_err(|e| e.to_string())?;
    let ratio = a.final_loss.total / a.initial.total;
    ensure(ratio < 0.25, || format!("final/initial = {ratio:.4}"))?;
    ensure(a.records == b.records, || "metrics differ between runs".into())?;
    ensure(a.student.params.bit_eq(&b.student.params), || "students differ between runs".into())?;
    ensure(a.final_loss.total.to_bits() == b.final_loss.total.to_bits(), || "final loss differs".into())?;
    let secs = started.elapsed().as_secs_f64();
    Ok(format!(
        "initial {:.4e}, final {:.4e}, ratio {ratio:.4}, reproducible ({secs:.1} s for two runs)",
        a.initial.total, a.final_loss.total
    ))
}

fn table_configurations() -> Outcome {
    let base = ModelConfig {
        num_layers: 2,
        width: 12,
        num_heads: 3,
        ffn_width: 16,
        input_dim: 4,
        seed: 21,
        post_ln: false,
    };
    let teacher = ModelWeights::init(&base).unwrap();
    let student = ModelWeights::init(&ModelConfig {
        width: 6,
        num_heads: 2,
        seed: 22,
        ..base
    })
    .unwrap();
    let x = oracle::random_tensor(4, 6, -2.0, 2.0, 23);
    let (t, s) = traces(&teacher, &student, &x);
    let mut evaluated = 0;
    for mask in 1u8..8 {
        let terms: Vec<LossTerm> = LossTerm::ALL
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, t)| *t)
            .collect();
        for norm in [false, true] {
            let mut cfg = StarLossConfig::with_terms(&terms);
            if norm {
                cfg = cfg.paper_literal();
            }
            let b = evaluate(&cfg, &t, &s).map_err(|e| format!("{terms:?}: {e}"))?;
            let expected: f64 = terms.iter().map(|&term| b.term(term).unwrap()).sum();
            ensure(b.total.is_finite() && (b.total - expected).abs() <= 1e-12 * expected.abs().max(1.0), || {
                format!("{terms:?}: total {} vs sum of terms {expected}", b.total)
            })?;
            for term in LossTerm::ALL {
                ensure(b.term(term).is_some() == terms.contains(&term), || {
                    format!("{terms:?}: unexpected presence of {}", term.name())
                })?;
            }
            evaluated += 1;
        }
    }
    let mut last = StarLossConfig::with_terms(&[LossTerm::AvgAttn]);
    last.avg_attn_last_layer_only = true;
    let b = evaluate(&last, &t, &s).map_err(|e| e.to_string())?;
    let map_t = avg_attention(&mut Eager, &t.attn_maps[1]).unwrap();
    let map_s = avg_attention(&mut Eager, &s.attn_maps[1]).unwrap();
    let direct = ops::kl_div_rows(&map_t, &map_s).unwrap() / 6.0;
    ensure((b.total - direct).abs() <= 1e-12, || format!("last-layer baseline {} vs {direct}", b.total))?;
    ensure(last.seq_normalization == SeqNormalization::BySteps, || "unexpected default".into())?;
    Ok(format!("7 term combinations x 2 normalizations ({evaluated} evaluations) plus last-layer baseline"))
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).expect("readable dir") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&path).expect("readable file")));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = DistillConfig::toy();
    cfg.steps = 40;
    cfg.batch_size = 6;
    cfg.teacher_warmup_steps = 5;
    cfg.loss = StarLossConfig::with_terms(&LossTerm::ALL);
    let mut trees = Vec::new();
    for threads in [1, 4] {
        let dir = tmp.path().join(format!("threads{threads}"));
        cfg.out_dir = Some(dir.clone());
        train_with(&cfg, &TrainOptions { threads }).map_err(|e| e.to_string())?;
        trees.push(read_tree(&dir));
    }
    let (serial, parallel) = (&trees[0], &trees[1]);
    let names: Vec<&String> = serial.iter().map(|(n, _)| n).collect();
    ensure(names.iter().any(|n| n.as_str() == "metrics.jsonl"), || "no metrics file".into())?;
    ensure(names.iter().any(|n| n.ends_with("manifest.json")), || "no checkpoint".into())?;
    ensure(serial.len() == parallel.len(), || "different file sets".into())?;
    for ((na, a), (nb, b)) in serial.iter().zip(parallel) {
        ensure(na == nb && a == b, || format!("{na} differs between 1 and 4 threads"))?;
    }
    Ok(format!("{} files byte-identical, 1 vs 4 threads", serial.len()))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("formula fidelity", formula_fidelity),
        ("gradient correctness", gradient_correctness),
        ("algebraic invariances", algebraic_invariances),
        ("width independence", width_independence),
        ("toy distillation regression", toy_regression),
        ("loss-selection plumbing", table_configurations),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("[PASS] {}. {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {}. {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
