//! Command-line driver for the step-wise embedding pipeline.

pub mod commands;
pub mod config;
pub mod failure;
pub mod sweep;

pub use config::ExperimentConfig;
pub use failure::{Failure, Kind};
