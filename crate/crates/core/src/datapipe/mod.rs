//! Datasets of ICU-style stays: loading, preprocessing, synthetic generation
//! and batching.
//!
//! Inside a [`Stay`], a missing cell is stored as NaN in `x` alongside a
//! `false` entry in `observed`. Forward imputation fills NaNs from earlier
//! observations; cells still NaN afterwards become 0 when scaled.

mod batch;
mod io;
mod preprocess;
mod synthetic;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use batch::{make_batches, Batch, Targets};
pub use io::{load_dataset, write_dataset, DatasetPaths};
pub use preprocess::{apply_scaler, fit_scaler, forward_impute, preprocess, preprocess_with, ScalerStats};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::grouping::GroupingScheme;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    OnlineBinary,
    PerStayBinary,
    Multiclass,
    Regression,
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "online_binary" => Ok(TaskKind::OnlineBinary),
            "per_stay_binary" => Ok(TaskKind::PerStayBinary),
            "multiclass" => Ok(TaskKind::Multiclass),
            "regression" => Ok(TaskKind::Regression),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    /// One label per step; `valid[t]` is false where no label exists.
    PerStep {
        values: Vec<f64>,
        valid: Vec<bool>,
    },
    PerStay(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stay {
    pub id: String,
    /// Row-major `T x d`.
    pub x: Vec<f64>,
    pub observed: Vec<bool>,
    pub labels: Labels,
    pub split: Split,
}

impl Stay {
    pub fn len(&self, d: usize) -> usize {
        self.x.len() / d
    }

    pub fn value(&self, d: usize, t: usize, j: usize) -> f64 {
        self.x[t * d + j]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesDataset {
    pub stays: Vec<Stay>,
    pub feature_names: Vec<String>,
    pub grouping: Option<GroupingScheme>,
    /// Hours per grid step.
    pub step_hours: f64,
    /// Set once the dataset has been imputed and scaled.
    pub scaler: Option<ScalerStats>,
}

impl TimeSeriesDataset {
    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Stay> {
        self.stays.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Structural checks: shared `d`, `T >= 1`, label lengths, `step_hours > 0`.
    pub fn validate(&self) -> Result<()> {
        let d = self.num_features();
        if d == 0 {
            return Err(Error::Data("dataset has no features".into()));
        }
        if self.step_hours.is_nan() || self.step_hours <= 0.0 {
            return Err(Error::Data(format!("step_hours must be positive, got {}", self.step_hours)));
        }
        for s in &self.stays {
            if s.x.is_empty() || s.x.len() % d != 0 || s.observed.len() != s.x.len() {
                return Err(Error::Data(format!("stay {} has inconsistent shape", s.id)));
            }
            if let Labels::PerStep { values, valid } = &s.labels {
                let t = s.len(d);
                if values.len() != t || valid.len() != t {
                    return Err(Error::Data(format!("stay {}: {} labels for {t} steps", s.id, values.len())));
                }
            }
        }
        if let Some(g) = &self.grouping {
            crate::grouping::validate_partition(g, d)?;
        }
        Ok(())
    }

    /// Fraction of positive labels among valid ones.
    pub fn prevalence(&self) -> f64 {
        let (mut pos, mut n) = (0usize, 0usize);
        for s in &self.stays {
            match &s.labels {
                Labels::PerStep { values, valid } => {
                    for (v, ok) in values.iter().zip(valid) {
                        if *ok {
                            n += 1;
                            pos += (*v > 0.5) as usize;
                        }
                    }
                }
                Labels::PerStay(v) => {
                    n += 1;
                    pos += (*v > 0.5) as usize;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            pos as f64 / n as f64
        }
    }
}
