//! Runs the reference toy distillation and prints the loss before and after.
//!
//! ```text
//! cargo run --release -p star-core --example toy_run
//! ```

use star_core::distill::{train_with, DistillConfig, TrainOptions};

fn main() -> star_core::Result<()> {
    let cfg = DistillConfig::toy();
    let out = train_with(&cfg, &TrainOptions::from_env())?;
    println!(
        "initial {:.6e}  final {:.6e}  ratio {:.4}",
        out.initial.total,
        out.final_loss.total,
        out.final_loss.total / out.initial.total
    );
    for r in out.records.iter().step_by(50) {
        println!("step {:4}  loss {:.6e}  lr {:.2e}", r.step, r.loss_total, r.lr);
    }
    Ok(())
}
