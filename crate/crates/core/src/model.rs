//! Full pipeline: step-wise embedding, causal backbone, prediction head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{self, BackboneSpec};
use crate::diffcore::{Graph, ParamStore, Var};
use crate::encoders::{self, EncoderSpec};
use crate::error::{Error, Result};
use crate::grouping::GroupedEncoder;

pub const EMBED_PREFIX: &str = "embed";
pub const BACKBONE_PREFIX: &str = "backbone";
pub const HEAD_PREFIX: &str = "head";

/// How each timestep's feature vector is turned into `h_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "type")]
pub enum Embedding {
    /// Raw features go straight to the backbone.
    None,
    /// One encoder over all features.
    Direct(EncoderSpec),
    Grouped(GroupedEncoder),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub embedding: Embedding,
    pub backbone: BackboneSpec,
}

/// Forward pass outputs.
pub struct ModelOutput {
    /// `[B, T, out]` per step or `[B, out]` per stay.
    pub logits: Var,
    /// Step-wise embeddings `[B, T, e]`.
    pub embeddings: Var,
    /// Per group, per layer FTT attention over `[B*T, heads, q, |M_k| + 1]`.
    pub group_attention: Vec<Vec<Var>>,
    /// Aggregator attention over `[B*T, heads, q, K + 1]`.
    pub aggregator_attention: Vec<Var>,
}

impl ModelConfig {
    pub fn embedding_dim(&self) -> usize {
        match &self.embedding {
            Embedding::None => self.input_dim,
            Embedding::Direct(spec) => spec.output_dim,
            Embedding::Grouped(ge) => ge.aggregator.output_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        match &self.embedding {
            Embedding::None => {}
            Embedding::Direct(spec) => {
                if spec.input_dim != self.input_dim {
                    return Err(Error::Config(format!(
                        "encoder input_dim {} != feature count {}",
                        spec.input_dim, self.input_dim
                    )));
                }
                spec.validate()?;
            }
            Embedding::Grouped(ge) => ge.validate(self.input_dim)?,
        }
        self.backbone.validate()
    }

    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        match &self.embedding {
            Embedding::None => {}
            Embedding::Direct(spec) => encoders::init_encoder(&mut store, EMBED_PREFIX, spec, &mut rng)?,
            Embedding::Grouped(ge) => ge.init(&mut store, EMBED_PREFIX, self.input_dim, &mut rng)?,
        }
        backbones::init_backbone(&mut store, BACKBONE_PREFIX, &self.backbone, self.embedding_dim(), &mut rng)?;
        backbones::init_head(&mut store, HEAD_PREFIX, &self.backbone, &mut rng);
        Ok(store)
    }

    /// Runs the pipeline on `x: [B, T, d]`. `steps` picks the per-stay
    /// readout step of every sequence and is ignored for per-step heads.
    pub fn forward(&self, g: &mut Graph, x: Var, steps: &[usize], full_attention: bool) -> Result<ModelOutput> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.input_dim {
            return Err(Error::Shape {
                op: "model",
                detail: format!("expected [B, T, {}], got {shape:?}", self.input_dim),
            });
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let mut group_attention = Vec::new();
        let mut aggregator_attention = Vec::new();
        let embeddings = match &self.embedding {
            Embedding::None => x,
            Embedding::Direct(spec) => {
                let flat = g.reshape(x, &[b * t, d])?;
                let enc = encoders::encode(g, EMBED_PREFIX, spec, flat, full_attention)?;
                if !enc.attention.is_empty() {
                    group_attention.push(enc.attention);
                }
                g.reshape(enc.h, &[b, t, spec.output_dim])?
            }
            Embedding::Grouped(ge) => {
                let flat = g.reshape(x, &[b * t, d])?;
                let out = ge.forward(g, EMBED_PREFIX, flat, full_attention)?;
                group_attention = out.group_attention;
                aggregator_attention = out.aggregator_attention;
                g.reshape(out.h, &[b, t, ge.aggregator.output_dim])?
            }
        };
        let hidden = backbones::backbone_forward(g, BACKBONE_PREFIX, &self.backbone, embeddings)?;
        let logits = backbones::predict(g, HEAD_PREFIX, &self.backbone, hidden, steps)?;
        Ok(ModelOutput { logits, embeddings, group_attention, aggregator_attention })
    }
}

/// True for parameters that belong to the embedding module.
pub fn is_embedding_param(name: &str) -> bool {
    name.strip_prefix(EMBED_PREFIX).is_some_and(|rest| rest.starts_with('.'))
}
