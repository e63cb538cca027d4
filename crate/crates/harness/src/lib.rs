//! Training, evaluation and benchmarking around the grounding network.

pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod optim;
pub mod train;

pub use config::{EvalConfig, QueryConfig, TrainConfig};
pub use error::{HarnessError, Result};
