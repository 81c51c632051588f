//! Prior-data fitted networks for tabular classification, with learned
//! context prompts, context compression, fairness-regularized tuning and a
//! benchmark/statistics harness.

pub mod bench;
pub mod context;
pub mod data;
pub mod error;
pub mod fairness;
pub mod metrics;
pub mod orchestrator;
pub mod pfn;
pub mod prior;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod tuning;

pub use error::{Error, Result};
