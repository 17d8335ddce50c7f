use std::f64::consts::PI;

/// Learning rate at `step` (0-based) of `total_steps`.
///
/// Linear warmup reaching `base_lr` at `step == warmup`, then cosine decay
/// `base_lr * 0.5 * (1 + cos(pi * p))` with `p = (step - warmup) / (total_steps - warmup)`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup: usize) -> f64 {
    if step < warmup {
        return base_lr * (step + 1) as f64 / (warmup + 1) as f64;
    }
    let span = total_steps.saturating_sub(warmup).max(1);
    let progress = (step - warmup) as f64 / span as f64;
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}
