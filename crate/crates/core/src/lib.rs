//! Parallel scene-text recognition: a tape autodiff core, the recognition
//! model and its baselines, a synthetic data generator and the training
//! harness.

pub mod backbone;
pub mod baseline;
pub mod data;
pub mod error;
pub mod gsrm;
pub mod harness;
pub mod nn;
pub mod pvam;
pub mod tensor;
pub mod vsfd;

pub use error::{Error, Result};
pub use tensor::{Graph, Real, Tensor, Var};
