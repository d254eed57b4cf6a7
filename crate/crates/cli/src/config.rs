//! Experiment configuration, read from a TOML file with `[data]`, `[model]`,
//! `[train]` and `[output]` sections. Unknown keys are rejected.
//!
//! Model defaults follow the selected values of the original hyperparameter
//! searches: FTT encoder with token dim 64, depth 1 and 2 heads over
//! dataset-provided groups, attention aggregation with depth 2, and a
//! Transformer backbone (hidden 64, depth 1, 1 head, dropout 0.4, attention
//! dropout 0.3) trained at learning rate 1e-4 with patience 10.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stepwise_core::backbones::{tcn_depth_for, BackboneKind, BackboneSpec, HeadKind, PredictionMode};
use stepwise_core::datapipe::{Labels, SyntheticSpec, TaskKind, TimeSeriesDataset};
use stepwise_core::encoders::{EncoderKind, EncoderSpec};
use stepwise_core::grouping::{AggregationMethod, AggregatorSpec, GroupedEncoder};
use stepwise_core::model::{Embedding, ModelConfig};
use stepwise_core::trainer::TrainConfig;

use crate::failure::Failure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Holds `data.csv`, `labels.csv`, `splits.csv` and optionally `groups.csv`.
    pub dir: PathBuf,
    #[serde(default = "one")]
    pub step_hours: f64,
    #[serde(default)]
    pub synthetic: SyntheticSection,
}

fn one() -> f64 {
    1.0
}

/// Generator settings for `generate`. The label type follows `train.task`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub seed: u64,
    pub n_stays: usize,
    pub t: usize,
    pub k: usize,
    pub feats_per_group: usize,
    pub missing_rate: f64,
    pub noise: f64,
    pub signal_groups: Option<Vec<usize>>,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self {
            seed: 0,
            n_stays: 2000,
            t: 64,
            k: 4,
            feats_per_group: 6,
            missing_rate: 0.3,
            noise: 0.3,
            signal_groups: None,
        }
    }
}

impl SyntheticSection {
    pub fn spec(&self, task: TaskKind) -> SyntheticSpec {
        let mut spec =
            SyntheticSpec::new(self.seed, self.n_stays, self.t, self.k, self.feats_per_group, self.missing_rate, task);
        spec.noise = self.noise;
        spec.signal_groups = self.signal_groups.clone();
        spec
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderChoice {
    /// Raw features feed the backbone.
    None,
    Linear,
    Mlp,
    Resnet,
    Ftt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionChoice {
    /// Per step for per-step labels, per stay otherwise.
    Auto,
    PerStep,
    PerStay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub encoder: EncoderChoice,
    /// `none`, `dataset` (the data directory's `groups.csv`) or a path to a
    /// `feature,group` CSV. Ignored when `encoder = "none"`.
    pub grouping: String,
    pub aggregation: AggregationMethod,
    /// Width of each step-wise (or concept) embedding.
    pub embed_dim: usize,
    pub embed_depth: usize,
    pub embed_hidden: usize,
    pub token_dim: usize,
    pub ftt_heads: usize,
    pub embed_dropout: f64,
    pub embed_attention_dropout: f64,
    pub agg_depth: usize,
    pub agg_heads: usize,
    /// Aggregated embedding width.
    pub agg_dim: usize,
    pub agg_dropout: f64,
    pub agg_attention_dropout: f64,
    pub backbone: BackboneKind,
    pub hidden_dim: usize,
    /// Defaults to 1, or for TCN the depth whose receptive field covers the
    /// longest stay.
    pub depth: Option<usize>,
    pub heads: usize,
    pub kernel_size: usize,
    pub dilation_base: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub prediction: PredictionChoice,
    /// Multiclass only; inferred from the labels when absent.
    pub classes: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            encoder: EncoderChoice::Ftt,
            grouping: "dataset".into(),
            aggregation: AggregationMethod::Attention,
            embed_dim: 32,
            embed_depth: 1,
            embed_hidden: 32,
            token_dim: 64,
            ftt_heads: 2,
            embed_dropout: 0.0,
            embed_attention_dropout: 0.0,
            agg_depth: 2,
            agg_heads: 2,
            agg_dim: 32,
            agg_dropout: 0.0,
            agg_attention_dropout: 0.0,
            backbone: BackboneKind::Transformer,
            hidden_dim: 64,
            depth: None,
            heads: 1,
            kernel_size: 2,
            dilation_base: 2,
            dropout: 0.4,
            attention_dropout: 0.3,
            prediction: PredictionChoice::Auto,
            classes: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs") }
    }
}

/// Where the grouping for a run comes from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GroupingSource {
    None,
    File(PathBuf),
}

impl ExperimentConfig {
    pub fn from_table(table: toml::Table) -> Result<Self, Failure> {
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Failure::config(e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, Failure> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Failure::config(e.to_string()))?;
        Self::from_table(table)
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        Self::parse(&read_config_text(path)?)
    }

    fn validate(&self) -> Result<(), Failure> {
        self.train.validate()?;
        if !(self.data.step_hours.is_finite() && self.data.step_hours > 0.0) {
            return Err(Failure::config("data.step_hours must be positive"));
        }
        Ok(())
    }

    pub fn grouping_source(&self) -> GroupingSource {
        match (self.model.encoder, self.model.grouping.as_str()) {
            (EncoderChoice::None, _) | (_, "none") => GroupingSource::None,
            (_, "dataset") => GroupingSource::File(self.data.dir.join("groups.csv")),
            (_, path) => GroupingSource::File(PathBuf::from(path)),
        }
    }
}

pub fn read_config_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn encoder_kind(choice: EncoderChoice) -> Option<EncoderKind> {
    match choice {
        EncoderChoice::None => None,
        EncoderChoice::Linear => Some(EncoderKind::Linear),
        EncoderChoice::Mlp => Some(EncoderKind::Mlp),
        EncoderChoice::Resnet => Some(EncoderKind::Resnet),
        EncoderChoice::Ftt => Some(EncoderKind::Ftt),
    }
}

fn infer_classes(ds: &TimeSeriesDataset) -> usize {
    let top = ds
        .stays
        .iter()
        .flat_map(|s| match &s.labels {
            Labels::PerStay(v) => vec![*v],
            Labels::PerStep { values, valid } => {
                values.iter().zip(valid).filter(|(_, &ok)| ok).map(|(v, _)| *v).collect()
            }
        })
        .fold(0.0f64, f64::max);
    top as usize + 1
}

impl ModelSection {
    /// Resolves the architecture against a loaded dataset: feature count,
    /// grouping, label layout and longest stay.
    pub fn build(&self, task: TaskKind, ds: &TimeSeriesDataset) -> Result<ModelConfig, Failure> {
        let d = ds.num_features();
        let per_step_labels = matches!(ds.stays.first().map(|s| &s.labels), Some(Labels::PerStep { .. }));
        let prediction = match self.prediction {
            PredictionChoice::Auto if per_step_labels => PredictionMode::PerStep,
            PredictionChoice::Auto => PredictionMode::PerStay,
            PredictionChoice::PerStep => PredictionMode::PerStep,
            PredictionChoice::PerStay => PredictionMode::PerStay,
        };
        let head = match task {
            TaskKind::OnlineBinary | TaskKind::PerStayBinary => HeadKind::Binary,
            TaskKind::Multiclass => HeadKind::Multiclass { classes: self.classes.unwrap_or_else(|| infer_classes(ds)) },
            TaskKind::Regression => HeadKind::Regression,
        };
        let longest = ds.stays.iter().map(|s| s.len(d)).max().unwrap_or(1);
        let depth = match (self.depth, self.backbone) {
            (Some(n), _) => n,
            (None, BackboneKind::Tcn) => tcn_depth_for(longest, self.kernel_size, self.dilation_base),
            (None, _) => 1,
        };
        let backbone = BackboneSpec {
            kind: self.backbone,
            hidden_dim: self.hidden_dim,
            depth,
            heads: self.heads,
            kernel_size: self.kernel_size,
            dilation_base: self.dilation_base,
            dropout: self.dropout,
            attention_dropout: self.attention_dropout,
            head,
            prediction,
        };
        let embedding = match encoder_kind(self.encoder) {
            None => Embedding::None,
            Some(kind) => {
                let encoder = EncoderSpec {
                    kind,
                    input_dim: d,
                    output_dim: self.embed_dim,
                    depth: self.embed_depth,
                    hidden_dim: self.embed_hidden,
                    token_dim: self.token_dim,
                    heads: self.ftt_heads,
                    dropout: self.embed_dropout,
                    attention_dropout: self.embed_attention_dropout,
                };
                match &ds.grouping {
                    None => Embedding::Direct(encoder),
                    Some(scheme) => Embedding::Grouped(GroupedEncoder {
                        scheme: scheme.clone(),
                        encoder,
                        aggregator: AggregatorSpec {
                            method: self.aggregation,
                            agg_depth: self.agg_depth,
                            agg_heads: self.agg_heads,
                            output_dim: self.agg_dim,
                            dropout: self.agg_dropout,
                            attention_dropout: self.agg_attention_dropout,
                        },
                    }),
                }
            }
        };
        let model = ModelConfig { input_dim: d, embedding, backbone };
        model.validate()?;
        Ok(model)
    }
}
