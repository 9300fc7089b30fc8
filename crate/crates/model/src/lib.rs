//! Diffusion machinery and the longitudinal diffusion transformer.

pub mod checkpoint;
pub mod ddpm;
pub mod error;
pub mod ldt;
mod ops;
pub mod params;
pub mod trainer;

pub use candle_core::DType;
pub use ddpm::{cosine_schedule, NoisePredictor, NoiseSchedule, SamplerConfig};
pub use error::{Error, Result};
pub use ldt::{Ldt, LdtConfig, SequenceCondition};
