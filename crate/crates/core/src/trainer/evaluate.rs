use serde::{Deserialize, Serialize};

use super::batch_forward;
use crate::datapipe::{make_batches, Split, TaskKind, TimeSeriesDataset};
use crate::diffcore::{Graph, Mode, ParamStore};
use crate::error::{Error, Result};
use crate::metrics::{self, KappaWeighting, DEFAULT_LOS_BIN_EDGES_HOURS};
use crate::model::ModelConfig;

/// Raw model outputs at every valid target, in dataset order.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// Row-major `[n, width]`: logits, or values for regression.
    pub outputs: Vec<f64>,
    pub width: usize,
    pub targets: Vec<f64>,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Sigmoid of the single logit per row.
    pub fn probabilities(&self) -> Vec<f64> {
        self.outputs.iter().map(|&l| 1.0 / (1.0 + (-l).exp())).collect()
    }

    pub fn argmax(&self) -> Vec<usize> {
        self.outputs
            .chunks(self.width)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect()
    }
}

/// Eval-mode predictions over `split` plus the mean task loss over all
/// valid targets.
pub fn predict_split(
    model: &ModelConfig,
    params: &ParamStore,
    ds: &TimeSeriesDataset,
    split: Split,
    task: TaskKind,
    batch_size: usize,
) -> Result<(Predictions, f64)> {
    let width = model.backbone.head.outputs();
    let mut preds = Predictions { outputs: Vec::new(), width, targets: Vec::new() };
    let (mut loss_sum, mut count) = (0.0, 0usize);
    for batch in make_batches(ds, split, batch_size, None)? {
        let mut g = Graph::new(params, Mode::Eval, 0);
        let (out, loss) = batch_forward(&mut g, model, task, &batch)?;
        loss_sum += g.value(loss.loss).item() * loss.count as f64;
        count += loss.count;
        let logits = g.value(out.logits).data();
        for (i, &m) in batch.mask.iter().enumerate() {
            if m {
                preds.outputs.extend_from_slice(&logits[i * width..(i + 1) * width]);
                preds.targets.push(batch.targets[i]);
            }
        }
    }
    let loss = if count > 0 { loss_sum / count as f64 } else { 0.0 };
    Ok((preds, loss))
}

/// Every metric that applies to `task`: AUPRC and AUROC for binary tasks;
/// balanced accuracy and linear kappa for multiclass; MAE in hours and
/// linear kappa over length-of-stay bins for regression. Kappa is NaN when
/// undefined.
pub fn metrics_for(task: TaskKind, preds: &Predictions) -> Result<Vec<(String, f64)>> {
    if preds.is_empty() {
        return Err(Error::Metric("no valid targets".into()));
    }
    let kappa_or_nan = |p: &[usize], t: &[usize], bins: usize| {
        metrics::cohen_kappa(p, t, bins, KappaWeighting::Linear).unwrap_or(f64::NAN)
    };
    Ok(match task {
        TaskKind::OnlineBinary | TaskKind::PerStayBinary => {
            let scores = preds.probabilities();
            let labels: Vec<bool> = preds.targets.iter().map(|&y| y > 0.5).collect();
            vec![
                ("auprc".into(), metrics::auprc(&scores, &labels)?),
                ("auroc".into(), metrics::auroc(&scores, &labels)?),
            ]
        }
        TaskKind::Multiclass => {
            let pred = preds.argmax();
            let truth: Vec<usize> = preds.targets.iter().map(|&y| y.max(0.0).round() as usize).collect();
            vec![
                ("balanced_accuracy".into(), metrics::balanced_accuracy(&pred, &truth)?),
                ("kappa".into(), kappa_or_nan(&pred, &truth, preds.width)),
            ]
        }
        TaskKind::Regression => {
            let edges = &DEFAULT_LOS_BIN_EDGES_HOURS;
            let bin = |v: &[f64]| v.iter().map(|&h| metrics::los_bin(h, edges)).collect::<Vec<_>>();
            vec![
                ("mae_hours".into(), metrics::mae_hours(&preds.outputs, &preds.targets, 1.0)?),
                ("kappa".into(), kappa_or_nan(&bin(&preds.outputs), &bin(&preds.targets), edges.len() + 1)),
            ]
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub split: Split,
    /// Number of valid targets scored.
    pub n: usize,
    /// Positive share for binary tasks.
    pub prevalence: Option<f64>,
    pub loss: f64,
    pub metrics: Vec<(String, f64)>,
}

impl MetricRecord {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }
}

pub fn evaluate(
    model: &ModelConfig,
    params: &ParamStore,
    ds: &TimeSeriesDataset,
    split: Split,
    task: TaskKind,
    batch_size: usize,
) -> Result<MetricRecord> {
    let (preds, loss) = predict_split(model, params, ds, split, task, batch_size)?;
    let prevalence = matches!(task, TaskKind::OnlineBinary | TaskKind::PerStayBinary)
        .then(|| preds.targets.iter().filter(|&&y| y > 0.5).count() as f64 / preds.len().max(1) as f64);
    Ok(MetricRecord { split, n: preds.len(), prevalence, loss, metrics: metrics_for(task, &preds)? })
}
