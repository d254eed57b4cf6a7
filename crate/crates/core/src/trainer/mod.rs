//! End-to-end supervised training with Adam, an L1 penalty on embedding
//! parameters, early stopping on validation loss and best-epoch selection.

mod checkpoint;
mod evaluate;
mod optim;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use evaluate::{evaluate, metrics_for, predict_split, MetricRecord, Predictions};
pub use optim::{clip_grad_norm, Adam};

use crate::datapipe::{make_batches, Batch, Split, Targets, TaskKind, TimeSeriesDataset};
use crate::diffcore::{Graph, Mode, ParamStore, Var};
use crate::error::{Error, Result};
use crate::model::{is_embedding_param, ModelConfig, ModelOutput};

/// Minimum decrease of validation loss that counts as an improvement.
pub const MIN_IMPROVEMENT: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub l1_weight: f64,
    pub seed: u64,
    pub task: TaskKind,
    /// Global gradient-norm bound; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            l1_weight: 0.0,
            seed: 0,
            task: TaskKind::OnlineBinary,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.l1_weight.is_nan() || self.l1_weight < 0.0 {
            return bad("l1_weight must be nonnegative");
        }
        if self.grad_clip.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }
}

/// A task loss and whether its mask selected nothing (loss is then 0).
pub struct LossOutput {
    pub loss: Var,
    pub empty: bool,
    pub count: usize,
}

/// Masked mean loss: BCE with logits for binary tasks, softmax
/// cross-entropy for multiclass, absolute error for regression.
pub fn task_loss(g: &mut Graph, task: TaskKind, logits: Var, targets: &[f64], mask: &[bool]) -> Result<LossOutput> {
    let count = mask.iter().filter(|&&m| m).count();
    let loss = match task {
        TaskKind::OnlineBinary | TaskKind::PerStayBinary => g.bce_with_logits(logits, targets, mask)?,
        TaskKind::Regression => g.abs_error(logits, targets, mask)?,
        TaskKind::Multiclass => {
            let classes = *g.shape(logits).last().expect("nonempty shape");
            let flat = g.reshape(logits, &[targets.len(), classes])?;
            let ids: Vec<usize> = targets.iter().map(|&t| t.max(0.0).round() as usize).collect();
            g.softmax_cross_entropy(flat, &ids, mask)?
        }
    };
    Ok(LossOutput { loss, empty: count == 0, count })
}

/// `loss + λ Σ|θ|` over embedding parameters only. `|θ|` is built as
/// `relu(θ) + relu(-θ)`, whose gradient at 0 is 0.
pub fn regularized_loss(g: &mut Graph, loss: Var, l1_weight: f64) -> Result<Var> {
    if l1_weight == 0.0 {
        return Ok(loss);
    }
    let names: Vec<String> = g.params().names().filter(|n| is_embedding_param(n)).cloned().collect();
    let mut total = loss;
    for name in names {
        let p = g.param(&name)?;
        let pos = g.relu(p);
        let neg = g.scale(p, -1.0);
        let neg = g.relu(neg);
        let abs = g.add(pos, neg)?;
        let s = g.sum_all(abs)?;
        let s = g.scale(s, l1_weight);
        total = g.add(total, s)?;
    }
    Ok(total)
}

/// Outcome of one early-stopping observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    NoImprovement,
    Stop,
}

/// Stops once validation loss has failed to improve by more than
/// [`MIN_IMPROVEMENT`] for `patience` consecutive epochs.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, stale: 0 }
    }

    /// Records the loss of `epoch` (1-based).
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> Verdict {
        if val_loss < self.best - MIN_IMPROVEMENT {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.stale = 0;
            return Verdict::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            Verdict::Stop
        } else {
            Verdict::NoImprovement
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    /// A non-finite loss or gradient; parameters from the best epoch so far
    /// are returned.
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// AUPRC for binary tasks, balanced accuracy for multiclass, MAE for
    /// regression. NaN where undefined (e.g. a single-class split).
    pub val_metric: Vec<f64>,
    /// 1-based; 0 if no epoch completed.
    pub best_epoch: usize,
    pub stop_reason: StopReason,
    /// Batches whose mask selected no targets.
    pub empty_batches: usize,
}

pub struct TrainOutcome {
    pub params: ParamStore,
    pub history: TrainHistory,
}

pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_task(model: &ModelConfig, task: TaskKind, batch: &Batch) -> Result<()> {
    use crate::backbones::{HeadKind, PredictionMode};
    let mode_ok = matches!(
        (model.backbone.prediction, batch.kind),
        (PredictionMode::PerStep, Targets::PerStep) | (PredictionMode::PerStay, Targets::PerStay)
    );
    let head_ok = match task {
        TaskKind::OnlineBinary | TaskKind::PerStayBinary => model.backbone.head == HeadKind::Binary,
        TaskKind::Multiclass => matches!(model.backbone.head, HeadKind::Multiclass { .. }),
        TaskKind::Regression => model.backbone.head == HeadKind::Regression,
    };
    if !mode_ok || !head_ok {
        return Err(Error::Config(format!(
            "task {task:?} with {:?} labels does not fit head {:?} in {:?} mode",
            batch.kind, model.backbone.head, model.backbone.prediction
        )));
    }
    Ok(())
}

/// Forward pass plus task loss on one batch.
pub fn batch_forward(
    g: &mut Graph,
    model: &ModelConfig,
    task: TaskKind,
    batch: &Batch,
) -> Result<(ModelOutput, LossOutput)> {
    check_task(model, task, batch)?;
    let x = g.constant(batch.x.clone())?;
    let out = model.forward(g, x, &batch.last_steps(), false)?;
    let loss = task_loss(g, task, out.logits, &batch.targets, &batch.mask)?;
    Ok((out, loss))
}

fn finite_grads(grads: &ParamStore) -> bool {
    grads.iter().all(|(_, t)| t.is_finite())
}

/// Trains from a fresh initialization seeded by `cfg.seed`. The dataset must
/// already be preprocessed.
pub fn train(model: &ModelConfig, cfg: &TrainConfig, ds: &TimeSeriesDataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.scaler.is_none() {
        return Err(Error::Data("dataset must be preprocessed before training".into()));
    }
    if ds.count(Split::Val) == 0 {
        return Err(Error::Data("validation split is empty".into()));
    }
    let mut params = model.init(cfg.seed)?;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best_params = params.clone();
    let mut history = TrainHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        val_metric: Vec::new(),
        best_epoch: 0,
        stop_reason: StopReason::MaxEpochs,
        empty_batches: 0,
    };

    'epochs: for epoch in 1..=cfg.max_epochs {
        let batches = make_batches(ds, Split::Train, cfg.batch_size, Some(mix_seed(cfg.seed, epoch as u64)))?;
        let mut total = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let dropout_seed = mix_seed(mix_seed(cfg.seed, epoch as u64), bi as u64 + 1);
            let mut g = Graph::new(&params, Mode::Train, dropout_seed);
            let (_, loss) = batch_forward(&mut g, model, cfg.task, batch)?;
            if loss.empty {
                history.empty_batches += 1;
            }
            let task_value = g.value(loss.loss).item();
            let objective = regularized_loss(&mut g, loss.loss, cfg.l1_weight)?;
            if !g.value(objective).item().is_finite() {
                history.stop_reason = StopReason::Diverged;
                break 'epochs;
            }
            g.backward(objective)?;
            let mut grads = g.param_grads();
            drop(g);
            if !finite_grads(&grads) {
                history.stop_reason = StopReason::Diverged;
                break 'epochs;
            }
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            adam.step(&mut params, &grads)?;
            total += task_value;
        }
        history.train_loss.push(total / batches.len() as f64);

        let (preds, val_loss) = predict_split(model, &params, ds, Split::Val, cfg.task, cfg.batch_size)?;
        if !val_loss.is_finite() {
            history.stop_reason = StopReason::Diverged;
            break;
        }
        history.val_loss.push(val_loss);
        history.val_metric.push(primary_metric(cfg.task, &preds));
        match stopper.observe(epoch, val_loss) {
            Verdict::Improved => best_params = params.clone(),
            Verdict::NoImprovement => {}
            Verdict::Stop => {
                history.stop_reason = StopReason::Patience;
                break;
            }
        }
    }
    history.best_epoch = stopper.best_epoch();
    if history.best_epoch == 0 {
        // no finite validation loss was ever recorded
        best_params = params;
    }
    Ok(TrainOutcome { params: best_params, history })
}

fn primary_metric(task: TaskKind, preds: &Predictions) -> f64 {
    let key = match task {
        TaskKind::OnlineBinary | TaskKind::PerStayBinary => "auprc",
        TaskKind::Multiclass => "balanced_accuracy",
        TaskKind::Regression => "mae_hours",
    };
    metrics_for(task, preds)
        .ok()
        .and_then(|m| m.into_iter().find(|(k, _)| k == key).map(|(_, v)| v))
        .unwrap_or(f64::NAN)
}
