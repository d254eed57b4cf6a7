//! Reusable layers built from tape primitives: affine maps, layer norm and
//! pre-norm transformer blocks.

use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x @ {prefix}.weight + {prefix}.bias` over the last axis.
pub fn linear(g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(&format!("{prefix}.weight"))?;
    let b = g.param(&format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

pub fn layer_norm(g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(&format!("{prefix}.gamma"))?;
    let beta = g.param(&format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
}

/// Which query rows a block computes. Only the first row (the CLS token)
/// is needed from the final block of a CLS-readout stack; the other rows do
/// not influence it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryRows {
    All,
    First,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockSpec {
    pub width: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub causal: bool,
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("attention width {} not divisible by {} heads", self.width, self.heads)));
        }
        Ok(())
    }
}

pub fn init_block(store: &mut ParamStore, prefix: &str, spec: &BlockSpec, rng: &mut ChaCha8Rng) {
    let m = spec.width;
    store.init_layer_norm(&format!("{prefix}.ln1"), m);
    for p in ["q", "k", "v", "o"] {
        store.init_linear(&format!("{prefix}.attn.{p}"), m, m, rng);
    }
    store.init_layer_norm(&format!("{prefix}.ln2"), m);
    store.init_linear(&format!("{prefix}.ffn.up"), m, spec.ffn_hidden, rng);
    store.init_linear(&format!("{prefix}.ffn.down"), spec.ffn_hidden, m, rng);
}

fn split_heads(g: &mut Graph, x: Var, n: usize, len: usize, heads: usize, dh: usize) -> Result<Var> {
    if heads == 1 {
        return g.reshape(x, &[n, len, dh]);
    }
    let x = g.reshape(x, &[n, len, heads, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[n * heads, len, dh])
}

fn merge_heads(g: &mut Graph, x: Var, n: usize, len: usize, heads: usize, dh: usize) -> Result<Var> {
    if heads == 1 {
        return g.reshape(x, &[n, len, dh]);
    }
    let x = g.reshape(x, &[n, heads, len, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[n, len, heads * dh])
}

/// Output of one transformer block.
pub struct BlockOutput {
    pub out: Var,
    /// Attention probabilities `[N, heads, q_rows, L]`.
    pub attention: Var,
}

/// Pre-norm block on `x: [N, L, width]`:
/// `x + Attn(LN(x))`, then `+ FFN(LN(.))` with a GELU feed-forward.
pub fn transformer_block(
    g: &mut Graph,
    prefix: &str,
    x: Var,
    spec: &BlockSpec,
    rows: QueryRows,
) -> Result<BlockOutput> {
    spec.validate()?;
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != spec.width {
        return Err(Error::Shape {
            op: "transformer-block",
            detail: format!("expected [N, L, {}], got {shape:?}", spec.width),
        });
    }
    let (n, len, m) = (shape[0], shape[1], shape[2]);
    let (heads, dh) = (spec.heads, spec.width / spec.heads);
    let lq = match rows {
        QueryRows::All => len,
        QueryRows::First => 1,
    };
    if spec.causal && lq != len {
        return Err(Error::Config("causal attention needs every query row".into()));
    }

    let h = layer_norm(g, &format!("{prefix}.ln1"), x)?;
    let (resid, q_src) = match rows {
        QueryRows::All => (x, h),
        QueryRows::First => (g.slice(x, 1, 0, 1)?, g.slice(h, 1, 0, 1)?),
    };
    let q = linear(g, &format!("{prefix}.attn.q"), q_src)?;
    let k = linear(g, &format!("{prefix}.attn.k"), h)?;
    let v = linear(g, &format!("{prefix}.attn.v"), h)?;
    let q = split_heads(g, q, n, lq, heads, dh)?;
    let k = split_heads(g, k, n, len, heads, dh)?;
    let v = split_heads(g, v, n, len, heads, dh)?;

    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let probs = g.softmax(scores, spec.causal)?;
    let attention = g.reshape(probs, &[n, heads, lq, len])?;
    let probs = g.dropout(probs, spec.attention_dropout)?;
    let ctx = g.batch_matmul(probs, v, false)?;
    let ctx = merge_heads(g, ctx, n, lq, heads, dh)?;
    let attn_out = linear(g, &format!("{prefix}.attn.o"), ctx)?;
    let attn_out = g.dropout(attn_out, spec.dropout)?;
    let x1 = g.add(resid, attn_out)?;

    let h2 = layer_norm(g, &format!("{prefix}.ln2"), x1)?;
    let up = linear(g, &format!("{prefix}.ffn.up"), h2)?;
    let up = g.gelu(up);
    let up = g.dropout(up, spec.dropout)?;
    let down = linear(g, &format!("{prefix}.ffn.down"), up)?;
    let down = g.dropout(down, spec.dropout)?;
    let out = g.add(x1, down)?;
    debug_assert_eq!(g.shape(out), &[n, lq, m]);
    Ok(BlockOutput { out, attention })
}

/// Prepends the learned `{name}` token `[width]` to every set in `x: [N, L, width]`.
pub fn prepend_cls(g: &mut Graph, name: &str, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let cls = g.param(name)?;
    let cls = g.reshape(cls, &[1, shape[2]])?;
    let zeros = g.constant(Tensor::zeros(&[shape[0], 1, shape[2]]))?;
    let cls_rows = g.add(zeros, cls)?;
    g.concat(&[cls_rows, x], 1)
}

/// Result of a CLS-readout transformer stack.
pub struct ClsStackOutput {
    /// Final CLS state after the closing layer norm, `[N, width]`.
    pub cls: Var,
    /// Per-block attention `[N, heads, q_rows, L]`; the last block has
    /// `q_rows == 1` unless full attention was requested.
    pub attention: Vec<Var>,
}

/// Runs `depth` blocks over `[CLS; tokens]` and returns the normalized CLS row.
pub fn cls_stack(
    g: &mut Graph,
    prefix: &str,
    tokens: Var,
    depth: usize,
    spec: &BlockSpec,
    full_attention: bool,
) -> Result<ClsStackOutput> {
    let mut x = prepend_cls(g, &format!("{prefix}.cls"), tokens)?;
    let mut attention = Vec::with_capacity(depth);
    for layer in 0..depth {
        let rows = if layer + 1 == depth && !full_attention { QueryRows::First } else { QueryRows::All };
        let out = transformer_block(g, &format!("{prefix}.block{layer}"), x, spec, rows)?;
        attention.push(out.attention);
        x = out.out;
    }
    let first = g.slice(x, 1, 0, 1)?;
    let n = g.shape(first)[0];
    let first = g.reshape(first, &[n, spec.width])?;
    let cls = layer_norm(g, &format!("{prefix}.ln_out"), first)?;
    Ok(ClsStackOutput { cls, attention })
}

pub fn init_cls_stack(store: &mut ParamStore, prefix: &str, depth: usize, spec: &BlockSpec, rng: &mut ChaCha8Rng) {
    let bound = 1.0 / (spec.width as f64).sqrt();
    store.init_uniform(format!("{prefix}.cls"), &[spec.width], bound, rng);
    for layer in 0..depth {
        init_block(store, &format!("{prefix}.block{layer}"), spec, rng);
    }
    store.init_layer_norm(&format!("{prefix}.ln_out"), spec.width);
}

/// Sinusoidal position table `[len, width]`.
pub fn sinusoidal_positions(len: usize, width: usize) -> Tensor {
    let mut data = vec![0.0; len * width];
    for t in 0..len {
        for i in 0..width {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let angle = t as f64 * freq;
            data[t * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, width], data).expect("positive dims")
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::diffcore::{finite_diff_check, Mode};

    fn spec(width: usize, heads: usize, causal: bool) -> BlockSpec {
        BlockSpec { width, heads, ffn_hidden: 2 * width, dropout: 0.1, attention_dropout: 0.1, causal }
    }

    #[test]
    fn first_row_query_matches_full_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = spec(8, 2, false);
        let mut p = ParamStore::new();
        init_block(&mut p, "b", &s, &mut rng);
        p.init_uniform("x", &[3, 5, 8], 1.0, &mut rng);
        let run = |rows| {
            let mut g = Graph::new(&p, Mode::Eval, 0);
            let x = g.param("x").unwrap();
            let o = transformer_block(&mut g, "b", x, &s, rows).unwrap();
            let first = g.slice(o.out, 1, 0, 1).unwrap();
            let att = g.slice(o.attention, 2, 0, 1).unwrap();
            (g.value(first).clone(), g.value(att).clone())
        };
        let (full, att_full) = run(QueryRows::All);
        let (cls, att_cls) = run(QueryRows::First);
        for (a, b) in full.data().iter().zip(cls.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in att_full.data().iter().zip(att_cls.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        for causal in [false, true] {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let s = spec(4, 2, causal);
            let mut p = ParamStore::new();
            init_block(&mut p, "b", &s, &mut rng);
            p.init_uniform("x", &[2, 3, 4], 1.0, &mut rng);
            let err = finite_diff_check(
                |g| {
                    let x = g.param("x")?;
                    let o = transformer_block(g, "b", x, &s, QueryRows::All)?;
                    let sq = g.mul(o.out, o.out)?;
                    g.sum_all(sq)
                },
                &p,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "causal={causal}: {err}");
        }
    }

    #[test]
    fn heads_must_divide_width() {
        assert!(spec(6, 4, false).validate().is_err());
        assert!(spec(8, 4, false).validate().is_ok());
    }

    #[test]
    fn positions_start_with_sin_cos() {
        let pe = sinusoidal_positions(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.row(1)[0] - 1f64.sin()).abs() < 1e-15);
    }
}
