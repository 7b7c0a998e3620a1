//! Causal, low-latency, class-conditioned target sound extraction.

pub mod condition;
pub mod error;
pub mod filterbank;
pub mod fsutil;
pub mod model;
pub mod objectives;
pub mod params;
pub mod runtime;
pub mod scenegen;
pub mod separator;
pub mod tensor;
pub mod trainer;
pub mod wav;
pub mod weights;

pub use error::{Error, Result};
