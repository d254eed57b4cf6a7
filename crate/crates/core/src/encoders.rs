//! Step-wise feature encoders: map one timestep's feature vector to an
//! embedding. Inputs are batched as `[N, d]` where `N` counts timesteps.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{self, BlockSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Linear,
    Mlp,
    Resnet,
    Ftt,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "mlp" => Ok(Self::Mlp),
            "resnet" => Ok(Self::Resnet),
            "ftt" => Ok(Self::Ftt),
            other => Err(Error::Config(format!("unknown encoder kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub depth: usize,
    pub hidden_dim: usize,
    /// Per-feature token width (ftt only).
    pub token_dim: usize,
    /// Attention heads (ftt only).
    pub heads: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("encoder: {msg}")));
        if self.input_dim == 0 || self.output_dim == 0 {
            return bad("input_dim and output_dim must be positive".into());
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.attention_dropout) {
            return bad("dropout rates must lie in [0, 1)".into());
        }
        match self.kind {
            EncoderKind::Mlp | EncoderKind::Resnet if self.hidden_dim == 0 => bad("hidden_dim must be positive".into()),
            EncoderKind::Ftt
                if self.token_dim == 0 || self.heads == 0 || !self.token_dim.is_multiple_of(self.heads) =>
            {
                bad(format!("token_dim {} must be a positive multiple of heads {}", self.token_dim, self.heads))
            }
            _ => Ok(()),
        }
    }

    pub(crate) fn block_spec(&self) -> BlockSpec {
        BlockSpec {
            width: self.token_dim,
            heads: self.heads,
            ffn_hidden: 2 * self.token_dim,
            dropout: self.dropout,
            attention_dropout: self.attention_dropout,
            causal: false,
        }
    }
}

/// Encoder output for a batch of timesteps.
pub struct Encoded {
    /// `[N, output_dim]`
    pub h: Var,
    /// FTT only: per-layer attention `[N, heads, q_rows, d + 1]`, token 0 is CLS.
    pub attention: Vec<Var>,
}

pub fn init_encoder(store: &mut ParamStore, prefix: &str, spec: &EncoderSpec, rng: &mut ChaCha8Rng) -> Result<()> {
    spec.validate()?;
    let (d, out, hid) = (spec.input_dim, spec.output_dim, spec.hidden_dim);
    match spec.kind {
        EncoderKind::Linear => store.init_linear(&format!("{prefix}.out"), d, out, rng),
        EncoderKind::Mlp => {
            let mut fan_in = d;
            for l in 0..spec.depth {
                store.init_linear(&format!("{prefix}.layer{l}"), fan_in, hid, rng);
                fan_in = hid;
            }
            store.init_linear(&format!("{prefix}.out"), hid, out, rng);
        }
        EncoderKind::Resnet => {
            store.init_linear(&format!("{prefix}.stem"), d, hid, rng);
            for l in 0..spec.depth {
                store.init_linear(&format!("{prefix}.block{l}.fc1"), hid, hid, rng);
                store.init_linear(&format!("{prefix}.block{l}.fc2"), hid, hid, rng);
            }
            store.init_linear(&format!("{prefix}.out"), hid, out, rng);
        }
        EncoderKind::Ftt => {
            let m = spec.token_dim;
            let bound = 1.0 / (m as f64).sqrt();
            store.init_uniform(format!("{prefix}.tokenizer.weight"), &[d, m], bound, rng);
            store.init_uniform(format!("{prefix}.tokenizer.bias"), &[d, m], bound, rng);
            nn::init_cls_stack(store, &format!("{prefix}.tf"), spec.depth, &spec.block_spec(), rng);
            store.init_linear(&format!("{prefix}.out"), m, out, rng);
        }
    }
    Ok(())
}

fn check_input(g: &Graph, spec: &EncoderSpec, x: Var) -> Result<usize> {
    let s = g.shape(x);
    if s.len() != 2 || s[1] != spec.input_dim {
        return Err(Error::Shape { op: "encoder", detail: format!("expected [N, {}], got {s:?}", spec.input_dim) });
    }
    Ok(s[0])
}

/// Per-feature tokens `[N, d, m]`: row `j` is `x_j * W_j + b_j`.
pub fn feature_tokenize(g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(&format!("{prefix}.tokenizer.weight"))?;
    let b = g.param(&format!("{prefix}.tokenizer.bias"))?;
    g.feature_tokenize(x, w, b)
}

/// Feature Tokenizer + Transformer: tokenizes each feature, prepends a CLS
/// token (row 0), runs `depth` pre-norm blocks without positional encoding
/// and projects the final CLS state to `output_dim`.
///
/// With `full_attention` the last block also computes the non-CLS query
/// rows so the full `(d+1) x (d+1)` attention is available; the embedding
/// is identical either way.
pub fn ftt_forward(g: &mut Graph, prefix: &str, spec: &EncoderSpec, x: Var, full_attention: bool) -> Result<Encoded> {
    if spec.kind != EncoderKind::Ftt {
        return Err(Error::Config(format!("ftt_forward called with {:?} encoder", spec.kind)));
    }
    spec.validate()?;
    check_input(g, spec, x)?;
    let tokens = feature_tokenize(g, prefix, x)?;
    let stack = nn::cls_stack(g, &format!("{prefix}.tf"), tokens, spec.depth, &spec.block_spec(), full_attention)?;
    let h = nn::linear(g, &format!("{prefix}.out"), stack.cls)?;
    Ok(Encoded { h, attention: stack.attention })
}

/// Linear, MLP and ResNet encoders.
pub fn dense_encoder_forward(g: &mut Graph, prefix: &str, spec: &EncoderSpec, x: Var) -> Result<Var> {
    spec.validate()?;
    check_input(g, spec, x)?;
    match spec.kind {
        EncoderKind::Linear => nn::linear(g, &format!("{prefix}.out"), x),
        EncoderKind::Mlp => {
            let mut h = x;
            for l in 0..spec.depth {
                h = nn::linear(g, &format!("{prefix}.layer{l}"), h)?;
                h = g.relu(h);
                h = g.dropout(h, spec.dropout)?;
            }
            nn::linear(g, &format!("{prefix}.out"), h)
        }
        EncoderKind::Resnet => {
            let mut h = nn::linear(g, &format!("{prefix}.stem"), x)?;
            for l in 0..spec.depth {
                let r = nn::linear(g, &format!("{prefix}.block{l}.fc1"), h)?;
                let r = g.relu(r);
                let r = g.dropout(r, spec.dropout)?;
                let r = nn::linear(g, &format!("{prefix}.block{l}.fc2"), r)?;
                h = g.add(h, r)?;
            }
            nn::linear(g, &format!("{prefix}.out"), h)
        }
        EncoderKind::Ftt => Err(Error::Config("dense_encoder_forward called with ftt encoder".into())),
    }
}

/// Dispatches on the encoder kind.
pub fn encode(g: &mut Graph, prefix: &str, spec: &EncoderSpec, x: Var, full_attention: bool) -> Result<Encoded> {
    match spec.kind {
        EncoderKind::Ftt => ftt_forward(g, prefix, spec, x, full_attention),
        _ => Ok(Encoded { h: dense_encoder_forward(g, prefix, spec, x)?, attention: Vec::new() }),
    }
}
