pub mod attribution;
pub mod classifier;
pub mod cli;
pub mod config;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod report;
pub mod seed;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
