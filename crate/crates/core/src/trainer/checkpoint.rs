//! Checkpoint container: magic, `u32` version, `u64` header length, a JSON
//! header, then little-endian `f64` payloads for every tensor (name order)
//! followed by the scaler mean and std.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::datapipe::ScalerStats;
use crate::diffcore::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::grouping::GroupingScheme;
use crate::model::ModelConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STEPWEMB";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ParamStore,
    pub scaler: Option<ScalerStats>,
    pub grouping: Option<GroupingScheme>,
    pub feature_names: Vec<String>,
    pub best_epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    grouping: Option<GroupingScheme>,
    feature_names: Vec<String>,
    best_epoch: usize,
    tensors: Vec<(String, Vec<usize>)>,
    scaler_width: Option<usize>,
}

fn corrupt<T>(msg: impl std::fmt::Display) -> Result<T> {
    Err(Error::Data(format!("checkpoint: {msg}")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return corrupt("truncated");
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Data("checkpoint: size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            grouping: self.grouping.clone(),
            feature_names: self.feature_names.clone(),
            best_epoch: self.best_epoch,
            tensors: self.params.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
            scaler_width: self.scaler.as_ref().map(|s| s.mean.len()),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let payload = self
            .params
            .iter()
            .flat_map(|(_, t)| t.data().iter())
            .chain(self.scaler.iter().flat_map(|s| s.mean.iter().chain(&s.std)));
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != CHECKPOINT_MAGIC {
            return corrupt("bad magic");
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return corrupt(format!("unsupported version {version}"));
        }
        let len = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
        let len = usize::try_from(len).or_else(|_| corrupt("header too large"))?;
        let header: Header = serde_json::from_slice(cur.take(len)?)?;
        let mut params = ParamStore::new();
        for (name, shape) in header.tensors {
            let n = shape.iter().product();
            params.insert(name, Tensor::new(shape, cur.f64s(n)?)?);
        }
        let scaler = match header.scaler_width {
            Some(w) => Some(ScalerStats { mean: cur.f64s(w)?, std: cur.f64s(w)? }),
            None => None,
        };
        if cur.pos != bytes.len() {
            return corrupt("trailing bytes");
        }
        Ok(Self {
            model: header.model,
            train: header.train,
            params,
            scaler,
            grouping: header.grouping,
            feature_names: header.feature_names,
            best_epoch: header.best_epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
