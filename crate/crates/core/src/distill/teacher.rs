use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::Adam;
use super::config::{DistillConfig, TeacherSource};
use super::data::BatchSampler;
use crate::error::{Result, StarError};
use crate::model::{checkpoint, forward_diff, ModelWeights, Params};
use crate::numerics::{ops, Backend, Graph, Tensor};

/// Fraction of time steps hidden during teacher warm-up.
const MASK_RATE: f64 = 0.3;

/// Builds the frozen teacher: from a checkpoint or a seeded init, then
/// `teacher_warmup_steps` of masked reconstruction.
pub fn make_teacher(cfg: &DistillConfig, corpus: &[Tensor]) -> Result<ModelWeights> {
    let mut teacher = match &cfg.teacher {
        TeacherSource::Config(mc) => ModelWeights::init(mc)?,
        TeacherSource::Checkpoint(dir) => checkpoint::load(dir)?,
    };
    super::config::check_pair(&teacher.config, &cfg.student)?;
    if cfg.teacher_warmup_steps > 0 {
        warm_up(&mut teacher, cfg, corpus)?;
        teacher.round_to_f32();
    }
    Ok(teacher)
}

/// Trains the teacher, plus a throwaway linear read-out, to reconstruct the
/// frames at randomly masked time steps from the encoder output.
fn warm_up(teacher: &mut ModelWeights, cfg: &DistillConfig, corpus: &[Tensor]) -> Result<()> {
    let mc = teacher.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run_seed ^ 0x7eac_4e12);
    let bound = 1.0 / (mc.width as f64).sqrt();
    let head_w = Tensor::matrix(
        mc.input_dim,
        mc.width,
        (0..mc.input_dim * mc.width)
            .map(|_| rng.random_range(-bound..bound))
            .collect(),
    )?;
    let mut head = [head_w, Tensor::zeros(&[mc.input_dim])];
    let mut opt = Adam::for_params(cfg.adam, &teacher.params);
    let mut head_opt = Adam::new(cfg.adam, head.iter());
    let mut sampler = BatchSampler::new(corpus.len(), cfg.run_seed ^ 0x7eac_4e13);

    for step in 0..cfg.teacher_warmup_steps {
        let batch = sampler.next_batch(cfg.batch_size);
        let mut grads: Option<Params<Tensor>> = None;
        let mut hg = [Tensor::zeros(head[0].shape()), Tensor::zeros(head[1].shape())];
        let mut total = 0.0;
        for &i in &batch {
            let x = &corpus[i];
            let (d, n) = x.dims2()?;
            let mut keep = vec![1.0; n];
            for k in keep.iter_mut() {
                if rng.random_bool(MASK_RATE) {
                    *k = 0.0;
                }
            }
            if keep.iter().all(|&k| k == 1.0) {
                keep[rng.random_range(0..n)] = 0.0;
            }
            let masked_cols = keep.iter().filter(|&&k| k == 0.0).count();
            let keep_mask = Tensor::matrix(d, n, (0..d * n).map(|j| keep[j % n]).collect())?;
            let hide_mask = keep_mask.map(|k| 1.0 - k);

            let mut g = Graph::new();
            let leaves = teacher.params.to_leaves(&mut g);
            let hw = g.leaf(head[0].clone());
            let hb = g.leaf(head[1].clone());
            let km = g.constant(keep_mask);
            let hm = g.constant(hide_mask);
            let xin = g.constant(x.clone());
            let masked = g.mul(&xin, &km)?;
            let trace = forward_diff(&mut g, &mc, &leaves, masked)?;
            let recon = g.linear(&hw, &hb, &trace.output)?;
            let pred = g.mul(&recon, &hm)?;
            let target = g.mul(&xin, &hm)?;
            let sq = g.frobenius_sq_diff(&pred, &target)?;
            let loss = g.scale(&sq, 1.0 / (masked_cols * d * batch.len()) as f64);
            total += g.scalar_of(&loss);
            g.backward(loss)?;

            let item = leaves.map(|id| g.grad_or_zeros(*id));
            grads = Some(match grads {
                None => item,
                Some(acc) => acc.zip_map(&item, |a, b| ops::add(a, b).expect("same shape")),
            });
            hg[0] = ops::add(&hg[0], &g.grad_or_zeros(hw))?;
            hg[1] = ops::add(&hg[1], &g.grad_or_zeros(hb))?;
        }
        if !total.is_finite() {
            return Err(StarError::NonFinite {
                step,
                term: "teacher_warmup".into(),
            });
        }
        let grads = grads.expect("non-empty batch");
        opt.step(teacher.params.iter_mut(), grads.iter(), cfg.lr);
        head_opt.step(head.iter_mut(), hg.iter(), cfg.lr);
        if step % 50 == 0 || step + 1 == cfg.teacher_warmup_steps {
            info!("teacher warm-up step {step}: reconstruction loss {total:.6}");
        }
    }
    Ok(())
}
