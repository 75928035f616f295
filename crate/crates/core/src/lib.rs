//! Competitive co-training of two small autoregressive models.

pub mod autodiff;
pub mod error;

pub use error::{Error, Result};
pub mod model;
pub mod objectives;
pub mod optimizer;
pub mod metrics;
pub mod harness;
