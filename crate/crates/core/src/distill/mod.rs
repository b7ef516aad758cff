//! Per-block distillation of the feature maps against a frozen teacher,
//! and the per-block, per-rate error table built from it.

mod cache;
mod checkpoint;
mod loss;
mod optim;
mod table;
mod trainer;

pub use cache::{cache_teacher_trajectory, TrajectoryCache, TrajectoryEntry};
pub use checkpoint::{checkpoint_name, load_feature_checkpoint, save_feature_checkpoint};
pub use loss::{
    attention_distill_loss, loss_attention_distill, loss_value_distill, value_distill_grad, EXPONENT_CLAMP,
};
pub use optim::{adamw_step, AdamState, AdamW};
pub use table::{build_error_table, ErrorTable, ErrorTableMeta, ErrorTableRun};
pub use trainer::{
    block_activations, distill_block, heldout_error, Activation, BlockActivations, DistillConfig, DistillOutcome,
    LossKind,
};
