pub mod baselines;
pub mod bench;
pub mod causal;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod iern;
pub mod runner;
pub mod store;
pub mod synth;

pub use error::{LabError, Result};
