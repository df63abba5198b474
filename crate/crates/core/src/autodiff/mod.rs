//! Minimal reverse-mode automatic differentiation engine used by the
//! model: a flat tape of f64 tensors with eager forward evaluation and a
//! single reverse sweep.

mod gradcheck;
mod gru;
mod tape;

pub use gradcheck::{gradient_check, BlockReport, GradCheckReport, GradCheckSettings};
pub use gru::GruCellWeights;
pub use tape::{conv1d_output_len, BackwardFault, Tape, Tensor};
