pub mod analysis;
pub mod checkpoint;
pub mod features;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod synthetic;
pub mod trainer;

pub use scalar::Scalar;

pub use model::{Ablation, Branch, DrexModel, FusionConfig, ModelError, Prediction};

/// Single-precision model, the default for training and analysis.
pub type Model = DrexModel<f32>;
/// Double-precision model, used where exact reference comparisons matter.
pub type Model64 = DrexModel<f64>;
