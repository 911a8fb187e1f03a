//! Differentiable building blocks: primitives, the gradient tape, AdamW,
//! the one-cycle schedule and weight EMA.

pub mod ema;
pub mod ops;
pub mod optim;
pub mod params;
pub mod schedule;
pub mod tape;

use thiserror::Error;

pub use ema::{EmaInit, EmaState};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Param, ParamId, ParamStore};
pub use schedule::OneCycleSchedule;
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("backward called without a recorded forward pass for this loss")]
    NoForward,
    #[error("variable belongs to a different tape")]
    ForeignVar,
    #[error("parameters changed since the forward pass was recorded")]
    StaleTape,
    #[error("step {step} outside schedule range 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
}
