//! Step-wise feature embeddings for heterogeneous tabular time-series.

pub mod backbones;
pub mod datapipe;
pub mod diffcore;
pub mod encoders;
pub mod error;
pub mod explain;
pub mod grouping;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod trainer;

pub use error::{Error, PartitionError, Result};
