//! Desk-scale training: optimizer, schedule, loss, datasets and the loop.

pub mod data;
pub mod idx;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use data::{all_offsets, gen_stripes, gen_stripes_with_offsets, Dataset};
pub use idx::{load_idx, load_idx_dataset, parse_idx, IdxArray};
pub use loss::{cross_entropy_grad, cross_entropy_smoothed};
pub use optim::{adamw_step, cosine_lr, AdamWState, Schedule};
pub use trainer::{
    argmax_rows, evaluate, train_loop, train_on, DataSpec, MetricsHistory, StepMetrics,
    StripesSplit, TrainConfig, TrainOutcome,
};
