use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Labels, Split, TimeSeriesDataset};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Where a batch's targets live.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Targets {
    /// `targets` and `mask` are `[B * T]`, row-major over `(b, t)`.
    PerStep,
    /// `targets` and `mask` are `[B]`.
    PerStay,
}

/// Stays padded to the longest one in the batch. Padded steps hold zeros
/// and are excluded from `mask`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub stay_indices: Vec<usize>,
    /// `[B, T, d]`
    pub x: Tensor,
    pub lengths: Vec<usize>,
    pub kind: Targets,
    pub targets: Vec<f64>,
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn steps(&self) -> usize {
        self.x.shape()[1]
    }

    /// Last real step of every stay.
    pub fn last_steps(&self) -> Vec<usize> {
        self.lengths.iter().map(|&l| l - 1).collect()
    }

    /// `[B * T]` flags marking padded positions, which carry no data.
    pub fn padding(&self) -> Vec<bool> {
        let t = self.steps();
        self.lengths.iter().flat_map(|&l| (0..t).map(move |s| s >= l)).collect()
    }
}

/// Splits `split` into padded batches. With `Some(seed)` the stay order is
/// shuffled deterministically; with `None` dataset order is kept.
pub fn make_batches(ds: &TimeSeriesDataset, split: Split, batch_size: usize, seed: Option<u64>) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let d = ds.num_features();
    let mut idx: Vec<usize> = (0..ds.stays.len()).filter(|&i| ds.stays[i].split == split).collect();
    if idx.is_empty() {
        return Err(Error::Data(format!("split {split} is empty")));
    }
    if let Some(seed) = seed {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let kind = match ds.stays[idx[0]].labels {
        Labels::PerStep { .. } => Targets::PerStep,
        Labels::PerStay(_) => Targets::PerStay,
    };
    idx.chunks(batch_size)
        .map(|chunk| {
            let lengths: Vec<usize> = chunk.iter().map(|&i| ds.stays[i].len(d)).collect();
            let t_max = *lengths.iter().max().expect("nonempty chunk");
            let b = chunk.len();
            let mut x = vec![0.0; b * t_max * d];
            let (mut targets, mut mask) = match kind {
                Targets::PerStep => (vec![0.0; b * t_max], vec![false; b * t_max]),
                Targets::PerStay => (vec![0.0; b], vec![true; b]),
            };
            for (bi, &i) in chunk.iter().enumerate() {
                let stay = &ds.stays[i];
                if stay.x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Data(format!("stay {} has unprocessed missing values", stay.id)));
                }
                x[bi * t_max * d..][..stay.x.len()].copy_from_slice(&stay.x);
                match (&stay.labels, kind) {
                    (Labels::PerStep { values, valid }, Targets::PerStep) => {
                        targets[bi * t_max..][..values.len()].copy_from_slice(values);
                        mask[bi * t_max..][..valid.len()].copy_from_slice(valid);
                    }
                    (Labels::PerStay(v), Targets::PerStay) => targets[bi] = *v,
                    _ => return Err(Error::Data("stays mix per-step and per-stay labels".into())),
                }
            }
            Ok(Batch {
                stay_indices: chunk.to_vec(),
                x: Tensor::new(vec![b, t_max, d], x)?,
                lengths,
                kind,
                targets,
                mask,
            })
        })
        .collect()
}
