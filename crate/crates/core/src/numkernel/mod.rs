//! Dense matrices, the differentiable primitives the model is built from,
//! AdamW, and a finite-difference gradient checker.

mod gradcheck;
mod matrix;
mod optim;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport, NamedTensors, Parameters};
pub use matrix::Matrix;
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};

pub(crate) use tape::{sigmoid, top_k_indices};
