use std::path::{Path, PathBuf};

use stepwise_core::datapipe::{
    generate_synthetic, load_dataset, preprocess, preprocess_with, write_dataset, DatasetPaths, Split,
    TimeSeriesDataset,
};
use stepwise_core::explain::{aggregate_report, emit_report, Reduction};
use stepwise_core::trainer::{evaluate, train, Checkpoint, MetricRecord, StopReason, TrainHistory};

use crate::config::{ExperimentConfig, GroupingSource};
use crate::failure::Failure;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.toml";

pub struct Generated {
    pub dir: PathBuf,
    pub summary: String,
}

pub fn generate(cfg: &ExperimentConfig, seed: Option<u64>, out: Option<&Path>) -> Result<Generated, Failure> {
    let mut synth = cfg.data.synthetic.clone();
    if let Some(s) = seed {
        synth.seed = s;
    }
    let (ds, _) = generate_synthetic(&synth.spec(cfg.train.task))?;
    let dir = out.unwrap_or(&cfg.data.dir).to_path_buf();
    write_dataset(&ds, &dir)?;
    let groups = ds.grouping.as_ref().map_or(0, |g| g.len());
    let summary = format!(
        "wrote {} stays (train {}, val {}, test {}), {} features in {groups} groups to {}; label prevalence {:.4}",
        ds.stays.len(),
        ds.count(Split::Train),
        ds.count(Split::Val),
        ds.count(Split::Test),
        ds.num_features(),
        dir.display(),
        ds.prevalence()
    );
    Ok(Generated { dir, summary })
}

/// Loads the configured dataset, attaching the configured grouping.
pub fn load_raw(cfg: &ExperimentConfig) -> Result<TimeSeriesDataset, Failure> {
    let mut paths = DatasetPaths::in_dir(&cfg.data.dir, false);
    if let GroupingSource::File(p) = cfg.grouping_source() {
        if !p.exists() {
            return Err(Failure::config(format!("grouping file {} does not exist", p.display())));
        }
        paths.groups = Some(p);
    }
    Ok(load_dataset(&paths, cfg.data.step_hours)?)
}

pub struct Trained {
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
    pub scored: MetricRecord,
}

/// Trains in memory and scores `split`; nothing is written.
pub fn fit(cfg: &ExperimentConfig, raw: &TimeSeriesDataset, split: Split) -> Result<Trained, Failure> {
    let ds = preprocess(raw)?;
    let model = cfg.model.build(cfg.train.task, &ds)?;
    let outcome = train(&model, &cfg.train, &ds)?;
    if outcome.history.stop_reason == StopReason::Diverged {
        return Err(Failure::numeric(format!("training diverged after {} epochs", outcome.history.train_loss.len())));
    }
    let scored = evaluate(&model, &outcome.params, &ds, split, cfg.train.task, cfg.train.batch_size)?;
    Ok(Trained {
        checkpoint: Checkpoint {
            model,
            train: cfg.train.clone(),
            params: outcome.params,
            scaler: ds.scaler.clone(),
            grouping: ds.grouping.clone(),
            feature_names: ds.feature_names.clone(),
            best_epoch: outcome.history.best_epoch,
        },
        history: outcome.history,
        scored,
    })
}

pub fn write_history(history: &TrainHistory, path: &Path) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_loss", "val_metric"])?;
    for (i, ((tl, vl), vm)) in history.train_loss.iter().zip(&history.val_loss).zip(&history.val_metric).enumerate() {
        w.write_record([(i + 1).to_string(), tl.to_string(), vl.to_string(), vm.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub struct TrainRun {
    pub dir: PathBuf,
    pub summary: String,
}

pub fn train_cmd(cfg: &ExperimentConfig, seed: Option<u64>, out: Option<&Path>) -> Result<TrainRun, Failure> {
    let mut cfg = cfg.clone();
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let dir = out.unwrap_or(&cfg.output.dir).to_path_buf();
    let raw = load_raw(&cfg)?;
    let trained = fit(&cfg, &raw, Split::Val)?;
    std::fs::create_dir_all(&dir)?;
    trained.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    write_history(&trained.history, &dir.join(HISTORY_FILE))?;
    let resolved = toml::to_string(&cfg).map_err(|e| Failure::config(e.to_string()))?;
    std::fs::write(dir.join(RESOLVED_CONFIG_FILE), resolved)?;
    let metrics: Vec<String> = trained.scored.metrics.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
    let summary = format!(
        "trained {} epochs ({:?}), best epoch {}; val loss {:.4}, {}; wrote {}",
        trained.history.train_loss.len(),
        trained.history.stop_reason,
        trained.history.best_epoch,
        trained.scored.loss,
        metrics.join(", "),
        dir.display()
    );
    Ok(TrainRun { dir, summary })
}

/// Loads a dataset for a trained checkpoint and applies the checkpoint's
/// own scaler and grouping.
pub fn load_for_checkpoint(ckpt: &Checkpoint, data_dir: &Path, step_hours: f64) -> Result<TimeSeriesDataset, Failure> {
    let mut raw = load_dataset(&DatasetPaths::in_dir(data_dir, false), step_hours)?;
    if raw.feature_names != ckpt.feature_names {
        return Err(Failure::data(format!(
            "dataset features {:?} do not match the checkpoint's {:?}",
            raw.feature_names, ckpt.feature_names
        )));
    }
    let scaler = ckpt.scaler.clone().ok_or_else(|| Failure::data("checkpoint carries no scaler statistics"))?;
    raw.grouping = ckpt.grouping.clone();
    Ok(preprocess_with(&raw, scaler)?)
}

pub fn evaluate_cmd(
    checkpoint: &Path,
    data_dir: &Path,
    step_hours: f64,
    split: Split,
    out: &Path,
) -> Result<(MetricRecord, PathBuf), Failure> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let ds = load_for_checkpoint(&ckpt, data_dir, step_hours)?;
    let record = evaluate(&ckpt.model, &ckpt.params, &ds, split, ckpt.train.task, ckpt.train.batch_size)?;
    std::fs::create_dir_all(out)?;
    let path = out.join(format!("metrics_{split}.csv"));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["split", "metric", "value", "n", "seed"])?;
    let rows = std::iter::once(("loss".to_string(), record.loss)).chain(record.metrics.iter().cloned());
    for (name, value) in rows {
        w.write_record([
            split.to_string(),
            name,
            value.to_string(),
            record.n.to_string(),
            ckpt.train.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok((record, path))
}

pub fn explain_cmd(
    checkpoint: &Path,
    data_dir: &Path,
    step_hours: f64,
    split: Split,
    stays: &[String],
    reduction: Reduction,
    out: &Path,
) -> Result<Vec<PathBuf>, Failure> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let ds = load_for_checkpoint(&ckpt, data_dir, step_hours)?;
    let report =
        aggregate_report(&ckpt.model, &ckpt.params, &ds, split, stays, reduction, &checkpoint.display().to_string())?;
    Ok(emit_report(&report, out)?)
}
