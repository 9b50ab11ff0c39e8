//! Amortized causal effect estimation with a transformer neural process.

pub mod bcm;
pub mod diffengine;
pub mod digest;
pub mod error;
pub mod evalsuite;
pub mod formats;
pub mod model;
pub mod oracle;
pub mod training;

pub use error::{Error, Result};
