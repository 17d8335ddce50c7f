use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::config::{DataSource, DistillConfig};
use super::data::{gen_synthetic, load_files, BatchSampler};
use super::schedule::cosine_lr;
use super::teacher::make_teacher;
use crate::error::{Result, StarError};
use crate::model::{checkpoint, forward_diff, forward_with_trace, ModelWeights, Params};
use crate::numerics::{ops, Graph, Tensor};
use crate::starloss::{evaluate, star_loss_diff, LossBreakdown, LossTerm, PerTerm, StarLossConfig};

/// One optimizer step, one JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub terms: PerTerm<f64>,
    /// Global L2 norm of the averaged gradient, before clipping.
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

/// Execution knobs that do not change results.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainOptions {
    /// Worker threads for per-item forward/backward. Gradients are reduced
    /// in item order, so every value is the same for any thread count.
    pub threads: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { threads: 1 }
    }
}

impl TrainOptions {
    /// Thread count from `STAR_THREADS`, else the available cores.
    pub fn from_env() -> Self {
        let threads = std::env::var("STAR_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        Self { threads }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub teacher: ModelWeights,
    pub student: ModelWeights,
    /// Mean loss over the whole corpus before the first step.
    pub initial: LossBreakdown,
    /// Mean loss over the whole corpus after the last step.
    pub final_loss: LossBreakdown,
    pub records: Vec<MetricsRecord>,
}

pub fn load_corpus(cfg: &DistillConfig) -> Result<Vec<Tensor>> {
    match &cfg.data {
        DataSource::Synthetic(s) => gen_synthetic(s),
        DataSource::Files(paths) => load_files(paths, cfg.student.input_dim),
    }
}

/// Loss and student gradients for one sequence.
pub fn item_gradients(
    teacher: &ModelWeights,
    student: &ModelWeights,
    loss: &StarLossConfig,
    input: &Tensor,
) -> Result<(Params<Tensor>, LossBreakdown)> {
    let t_trace = forward_with_trace(teacher, input)?;
    let mut g = Graph::new();
    let leaves = student.params.to_leaves(&mut g);
    let x = g.constant(input.clone());
    let s_trace = forward_diff(&mut g, &student.config, &leaves, x)?;
    let l = star_loss_diff(&mut g, loss, &t_trace, &s_trace)?;
    g.backward(l.total)?;
    Ok((leaves.map(|id| g.grad_or_zeros(*id)), l.breakdown))
}

/// Mean loss over `corpus`.
pub fn evaluate_corpus(
    teacher: &ModelWeights,
    student: &ModelWeights,
    loss: &StarLossConfig,
    corpus: &[Tensor],
    pool: &rayon::ThreadPool,
) -> Result<LossBreakdown> {
    let items: Vec<LossBreakdown> = pool.install(|| {
        corpus
            .par_iter()
            .map(|x| {
                let t = forward_with_trace(teacher, x)?;
                let s = forward_with_trace(student, x)?;
                evaluate(loss, &t, &s)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    LossBreakdown::mean(&items)
}

fn check_finite(step: usize, b: &LossBreakdown) -> Result<()> {
    for term in LossTerm::ALL {
        if let Some(v) = b.term(term) {
            if !v.is_finite() {
                return Err(StarError::NonFinite {
                    step,
                    term: term.name().into(),
                });
            }
        }
    }
    if !b.total.is_finite() {
        return Err(StarError::NonFinite {
            step,
            term: "total".into(),
        });
    }
    Ok(())
}

/// [`train_with`] on a single thread.
pub fn train(cfg: &DistillConfig) -> Result<TrainOutcome> {
    train_with(cfg, &TrainOptions::default())
}

/// Distills a student from the (frozen) teacher described by `cfg`.
///
/// Each step draws `batch_size * accumulate_steps` sequences, runs the
/// teacher forward, the student forward and backward per sequence, averages
/// losses and gradients in sequence order and applies one Adam update at
/// the scheduled learning rate. When `cfg.out_dir` is set, writes
/// `metrics.jsonl`, `student/`, `teacher/` and `report.json` there.
pub fn train_with(cfg: &DistillConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let corpus = load_corpus(cfg)?;
    let teacher = make_teacher(cfg, &corpus)?;
    let mut student = ModelWeights::init(&cfg.student)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.max(1))
        .build()
        .map_err(|e| StarError::Config(format!("thread pool: {e}")))?;

    let mut metrics = match &cfg.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };

    let initial = evaluate_corpus(&teacher, &student, &cfg.loss, &corpus, &pool)?;
    info!("initial corpus loss {:.6e}", initial.total);
    let mut adam = Adam::for_params(cfg.adam, &student.params);
    let mut sampler = BatchSampler::new(corpus.len(), cfg.run_seed);
    let per_step = cfg.batch_size * cfg.accumulate_steps;
    let mut records = Vec::with_capacity(cfg.steps);
    let mut first_loss: Option<f64> = None;

    for step in 0..cfg.steps {
        let started = Instant::now();
        let batch = sampler.next_batch(per_step);
        let results: Vec<(Params<Tensor>, LossBreakdown)> = pool.install(|| {
            batch
                .par_iter()
                .map(|&i| item_gradients(&teacher, &student, &cfg.loss, &corpus[i]))
                .collect::<Result<Vec<_>>>()
        })?;

        let inv = 1.0 / results.len() as f64;
        let mut grads = results[0].0.clone();
        for (g, _) in &results[1..] {
            grads = grads.zip_map(g, |a, b| ops::add(a, b).expect("same layout"));
        }
        let mut grads = grads.map(|t| ops::scale(t, inv));
        let breakdowns: Vec<LossBreakdown> = results.into_iter().map(|(_, b)| b).collect();
        let loss = LossBreakdown::mean(&breakdowns)?;
        check_finite(step, &loss)?;

        let grad_norm = grads.global_norm();
        if !grad_norm.is_finite() {
            return Err(StarError::NonFinite {
                step,
                term: "gradient".into(),
            });
        }
        let reference = *first_loss.get_or_insert(loss.total);
        let limit = cfg.divergence_factor * reference.max(1.0);
        if loss.total > limit {
            return Err(StarError::Divergence {
                step,
                loss: loss.total,
                limit,
            });
        }
        if let Some(clip) = cfg.clip_grad_norm {
            if grad_norm > clip {
                let s = clip / grad_norm;
                grads = grads.map(|t| ops::scale(t, s));
            }
        }

        let lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.warmup_steps);
        adam.step(student.params.iter_mut(), grads.iter(), lr);

        let record = MetricsRecord {
            step,
            lr,
            loss_total: loss.total,
            terms: loss.terms.clone(),
            grad_norm,
            wall_ms: cfg
                .record_timing
                .then(|| started.elapsed().as_secs_f64() * 1e3),
        };
        if let Some(w) = metrics.as_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
        }
        if step % 50 == 0 || step + 1 == cfg.steps {
            info!("step {step}: loss {:.6e} lr {lr:.3e} |g| {grad_norm:.3e}", loss.total);
        }
        records.push(record);
    }

    let final_loss = evaluate_corpus(&teacher, &student, &cfg.loss, &corpus, &pool)?;
    check_finite(cfg.steps, &final_loss)?;
    info!("final corpus loss {:.6e}", final_loss.total);

    if let Some(mut w) = metrics {
        w.flush()?;
    }
    if let Some(dir) = &cfg.out_dir {
        write_outputs(dir, &teacher, &student, &initial, &final_loss)?;
    }
    Ok(TrainOutcome {
        teacher,
        student,
        initial,
        final_loss,
        records,
    })
}

fn write_outputs(
    dir: &Path,
    teacher: &ModelWeights,
    student: &ModelWeights,
    initial: &LossBreakdown,
    final_loss: &LossBreakdown,
) -> Result<()> {
    checkpoint::save(student, &dir.join("student"))?;
    checkpoint::save(teacher, &dir.join("teacher"))?;
    let report = serde_json::json!({ "initial": initial, "final": final_loss });
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(())
}
