//! Teacher-to-student distillation with the temporal-relation losses:
//! frozen teacher, Adam with a cosine schedule, seeded data, JSONL metrics.

mod adam;
mod config;
mod data;
mod schedule;
mod teacher;
mod train;

pub use adam::Adam;
pub use config::{check_pair, AdamConfig, DataSource, DistillConfig, TeacherSource};
pub use data::{gen_synthetic, load_files, write_corpus, BatchSampler, SyntheticConfig};
pub use schedule::cosine_lr;
pub use teacher::make_teacher;
pub use train::{
    evaluate_corpus, item_gradients, load_corpus, train, train_with, MetricsRecord, TrainOptions,
    TrainOutcome,
};
