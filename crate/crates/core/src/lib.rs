//! Cross-domain episodic learning for domain-generalized person
//! re-identification.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod plots;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
