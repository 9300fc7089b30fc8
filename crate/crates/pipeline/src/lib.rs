//! Two-stage training, trajectory synthesis, evaluation and reporting.

pub mod config;
pub mod error;
pub mod eval;
pub mod report;
pub mod stage1;
pub mod stage2;
pub mod synth;

pub use config::RunConfig;
pub use error::{Error, Result};
