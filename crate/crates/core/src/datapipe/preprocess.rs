use serde::{Deserialize, Serialize};

use super::{Split, Stay, TimeSeriesDataset};
use crate::error::{Error, Result};

/// Below this a feature's spread is treated as zero and its std set to 1.
const MIN_STD: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Fills each missing cell with the latest earlier value of that feature.
/// Cells with no earlier observation stay NaN (pending mean imputation).
pub fn forward_impute(stay: &Stay, d: usize) -> Stay {
    let mut out = stay.clone();
    let mut last = vec![f64::NAN; d];
    for row in out.x.chunks_mut(d) {
        for (v, l) in row.iter_mut().zip(last.iter_mut()) {
            if v.is_nan() {
                *v = *l;
            } else {
                *l = *v;
            }
        }
    }
    out
}

/// Per-feature mean and population std over observed cells of `stays`.
/// Features never observed get mean 0 and std 1.
pub fn fit_scaler<'a>(stays: impl IntoIterator<Item = &'a Stay>, d: usize) -> Result<ScalerStats> {
    let stays: Vec<&Stay> = stays.into_iter().collect();
    if stays.is_empty() {
        return Err(Error::Data("cannot fit scaler on an empty training split".into()));
    }
    let mut count = vec![0usize; d];
    let mut sum = vec![0.0; d];
    let observed = || {
        stays
            .iter()
            .flat_map(|s| s.x.iter().zip(&s.observed).enumerate())
            .filter(|(_, (_, &o))| o)
            .map(move |(i, (&v, _))| (i % d, v))
    };
    for (j, v) in observed() {
        count[j] += 1;
        sum[j] += v;
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
    let mut sq = vec![0.0; d];
    for (j, v) in observed() {
        sq[j] += (v - mean[j]).powi(2);
    }
    let std = sq
        .iter()
        .zip(&count)
        .map(|(&s, &c)| {
            let sd = if c > 0 { (s / c as f64).sqrt() } else { 0.0 };
            if sd < MIN_STD {
                1.0
            } else {
                sd
            }
        })
        .collect();
    Ok(ScalerStats { mean, std })
}

/// `(x - mean) / std`, with pending (NaN) cells set to exactly 0.
pub fn apply_scaler(stay: &Stay, stats: &ScalerStats) -> Stay {
    let d = stats.mean.len();
    let mut out = stay.clone();
    for (i, v) in out.x.iter_mut().enumerate() {
        let j = i % d;
        *v = if v.is_nan() { 0.0 } else { (*v - stats.mean[j]) / stats.std[j] };
    }
    out
}

/// Forward imputation, then scaling with statistics fit on the training
/// split. A dataset that already carries scaler stats is returned as is.
pub fn preprocess(ds: &TimeSeriesDataset) -> Result<TimeSeriesDataset> {
    if ds.scaler.is_some() {
        return Ok(ds.clone());
    }
    let stats = fit_scaler(ds.split(Split::Train), ds.num_features())?;
    preprocess_with(ds, stats)
}

/// Forward imputation, then scaling with previously fitted statistics, e.g.
/// those stored in a checkpoint.
pub fn preprocess_with(ds: &TimeSeriesDataset, stats: ScalerStats) -> Result<TimeSeriesDataset> {
    let d = ds.num_features();
    if stats.mean.len() != d || stats.std.len() != d {
        return Err(Error::Data(format!("scaler covers {} features, dataset has {d}", stats.mean.len())));
    }
    let stays = ds.stays.iter().map(|s| apply_scaler(&forward_impute(s, d), &stats)).collect();
    Ok(TimeSeriesDataset { stays, scaler: Some(stats), ..ds.clone() })
}
