//! Multi-modal drift forecasting for leeway objects.

pub mod baselines;
pub mod cnn;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod models;
pub mod physics;
pub mod simulator;
pub mod snapshot;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamStore, Tensor, Var};
