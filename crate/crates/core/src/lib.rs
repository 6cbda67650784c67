pub mod baselines;
pub mod data;
pub mod detect;
pub mod error;
pub mod isolate;
pub mod metrics;
pub mod nn;
pub mod ssl;

pub use error::{Error, Result};
