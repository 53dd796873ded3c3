//! Open-vocabulary video anomaly detection on precomputed frame features.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nas;
pub mod numkernel;
pub mod train;

pub use error::{Error, ErrorKind, Result};
