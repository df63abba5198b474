//! Optimization: Adam, the per-batch training step (generator and critic),
//! the epoch loop with logging/checkpointing, and a whole-model gradient
//! check harness.

mod adam;
mod check;
mod run;
mod step;

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use check::model_gradient_check;
pub use run::{train, TrainConfig, TrainOutcome, LOSS_CSV_HEADER};
pub use step::{assemble_batch, train_step, BatchData, LossValues, OptState};
