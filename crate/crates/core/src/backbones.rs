//! Causal sequence backbones over timestep embeddings `[B, T, e]`, plus the
//! prediction head.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{self, BlockSpec, QueryRows};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Gru,
    Transformer,
    Tcn,
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gru" => Ok(Self::Gru),
            "transformer" => Ok(Self::Transformer),
            "tcn" => Ok(Self::Tcn),
            other => Err(Error::Config(format!("unknown backbone `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum HeadKind {
    Binary,
    Multiclass { classes: usize },
    Regression,
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Binary | HeadKind::Regression => 1,
            HeadKind::Multiclass { classes } => classes,
        }
    }
}

/// Per-step predictions at every timestep, or one prediction per stay read
/// from a single step (the last observed one by default).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    PerStep,
    PerStay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub hidden_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub kernel_size: usize,
    pub dilation_base: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub head: HeadKind,
    pub prediction: PredictionMode,
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("backbone: {m}")));
        if self.hidden_dim == 0 || self.depth == 0 {
            return bad("hidden_dim and depth must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.attention_dropout) {
            return bad("dropout rates must lie in [0, 1)".into());
        }
        if let HeadKind::Multiclass { classes } = self.head {
            if classes < 2 {
                return bad("multiclass head needs at least 2 classes".into());
            }
        }
        match self.kind {
            BackboneKind::Transformer if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) => {
                bad(format!("hidden_dim {} not divisible by heads {}", self.hidden_dim, self.heads))
            }
            BackboneKind::Tcn if self.kernel_size == 0 || self.dilation_base == 0 => {
                bad("kernel_size and dilation_base must be positive".into())
            }
            _ => Ok(()),
        }
    }

    fn block_spec(&self) -> BlockSpec {
        BlockSpec {
            width: self.hidden_dim,
            heads: self.heads,
            ffn_hidden: 2 * self.hidden_dim,
            dropout: self.dropout,
            attention_dropout: self.attention_dropout,
            causal: true,
        }
    }

    /// TCN receptive field: `1 + sum_l (k - 1) * base^l`.
    pub fn receptive_field(&self) -> usize {
        1 + (0..self.depth).map(|l| (self.kernel_size - 1) * self.dilation_base.pow(l as u32)).sum::<usize>()
    }
}

/// Smallest TCN depth whose receptive field covers `t` steps.
pub fn tcn_depth_for(t: usize, kernel_size: usize, dilation_base: usize) -> usize {
    let mut depth = 1;
    let mut rf = 1 + (kernel_size - 1);
    while rf < t && kernel_size > 1 {
        rf += (kernel_size - 1) * dilation_base.pow(depth as u32);
        depth += 1;
    }
    depth
}

pub fn init_backbone(
    store: &mut ParamStore,
    prefix: &str,
    spec: &BackboneSpec,
    input_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    spec.validate()?;
    let h = spec.hidden_dim;
    match spec.kind {
        BackboneKind::Gru => {
            let bound = 1.0 / (h as f64).sqrt();
            let mut fan_in = input_dim;
            for l in 0..spec.depth {
                store.init_uniform(format!("{prefix}.gru{l}.wx.weight"), &[fan_in, 3 * h], bound, rng);
                store.init_uniform(format!("{prefix}.gru{l}.wx.bias"), &[3 * h], bound, rng);
                store.init_uniform(format!("{prefix}.gru{l}.wh.weight"), &[h, 3 * h], bound, rng);
                store.init_uniform(format!("{prefix}.gru{l}.wh.bias"), &[3 * h], bound, rng);
                fan_in = h;
            }
        }
        BackboneKind::Transformer => {
            store.init_linear(&format!("{prefix}.input"), input_dim, h, rng);
            for l in 0..spec.depth {
                nn::init_block(store, &format!("{prefix}.block{l}"), &spec.block_spec(), rng);
            }
            store.init_layer_norm(&format!("{prefix}.ln_out"), h);
        }
        BackboneKind::Tcn => {
            store.init_linear(&format!("{prefix}.input"), input_dim, h, rng);
            for l in 0..spec.depth {
                store.init_linear(&format!("{prefix}.tcn{l}.conv"), spec.kernel_size * h, h, rng);
            }
        }
    }
    Ok(())
}

pub fn init_head(store: &mut ParamStore, prefix: &str, spec: &BackboneSpec, rng: &mut ChaCha8Rng) {
    store.init_linear(prefix, spec.hidden_dim, spec.head.outputs(), rng);
}

fn check_seq(g: &Graph, x: Var, what: &'static str) -> Result<(usize, usize, usize)> {
    let s = g.shape(x);
    if s.len() != 3 {
        return Err(Error::Shape { op: what, detail: format!("expected [B, T, e], got {s:?}") });
    }
    Ok((s[0], s[1], s[2]))
}

/// Stacked GRU with zero initial state:
/// `r = σ(x W_r + h U_r)`, `z = σ(x W_z + h U_z)`,
/// `n = tanh(x W_n + r ⊙ (h U_n))`, `h' = (1 - z) ⊙ n + z ⊙ h`.
pub fn gru_forward(g: &mut Graph, prefix: &str, spec: &BackboneSpec, seq: Var) -> Result<Var> {
    let (b, t, _) = check_seq(g, seq, "gru")?;
    let h = spec.hidden_dim;
    let mut input = seq;
    for l in 0..spec.depth {
        let p = format!("{prefix}.gru{l}");
        let wx_rows = g.params().get(&format!("{p}.wx.weight")).map(|w| w.shape()[0]);
        if wx_rows != Some(g.shape(input)[2]) {
            return Err(Error::Shape {
                op: "gru",
                detail: format!("layer {l} expects input width {wx_rows:?}, got {:?}", g.shape(input)),
            });
        }
        let xp = nn::linear(g, &format!("{p}.wx"), input)?;
        let mut state = g.constant(Tensor::zeros(&[b, h]))?;
        let mut outs = Vec::with_capacity(t);
        for step in 0..t {
            let xt = g.slice(xp, 1, step, step + 1)?;
            let xt = g.reshape(xt, &[b, 3 * h])?;
            let hp = nn::linear(g, &format!("{p}.wh"), state)?;
            let x_rz = g.slice(xt, 1, 0, 2 * h)?;
            let h_rz = g.slice(hp, 1, 0, 2 * h)?;
            let rz = g.add(x_rz, h_rz)?;
            let rz = g.sigmoid(rz);
            let r = g.slice(rz, 1, 0, h)?;
            let z = g.slice(rz, 1, h, 2 * h)?;
            let x_n = g.slice(xt, 1, 2 * h, 3 * h)?;
            let h_n = g.slice(hp, 1, 2 * h, 3 * h)?;
            let gated = g.mul(r, h_n)?;
            let n = g.add(x_n, gated)?;
            let n = g.tanh(n);
            let diff = g.sub(state, n)?;
            let keep = g.mul(z, diff)?;
            state = g.add(n, keep)?;
            outs.push(g.reshape(state, &[b, 1, h])?);
        }
        input = if t == 1 { outs[0] } else { g.concat(&outs, 1)? };
        if l + 1 < spec.depth {
            input = g.dropout(input, spec.dropout)?;
        }
    }
    Ok(input)
}

/// Input projection, sinusoidal positions, causal pre-norm blocks, final norm.
pub fn transformer_forward(g: &mut Graph, prefix: &str, spec: &BackboneSpec, seq: Var) -> Result<Var> {
    let (_, t, _) = check_seq(g, seq, "transformer")?;
    let x = nn::linear(g, &format!("{prefix}.input"), seq)?;
    let pe = g.constant(nn::sinusoidal_positions(t, spec.hidden_dim))?;
    let mut x = g.add(x, pe)?;
    x = g.dropout(x, spec.dropout)?;
    for l in 0..spec.depth {
        x = nn::transformer_block(g, &format!("{prefix}.block{l}"), x, &spec.block_spec(), QueryRows::All)?.out;
    }
    nn::layer_norm(g, &format!("{prefix}.ln_out"), x)
}

/// `x` delayed by `lag` steps along time, zero-filled at the start.
fn delay(g: &mut Graph, x: Var, lag: usize) -> Result<Var> {
    let (b, t, c) = check_seq(g, x, "tcn")?;
    if lag == 0 {
        return Ok(x);
    }
    if lag >= t {
        return g.constant(Tensor::zeros(&[b, t, c]));
    }
    let pad = g.constant(Tensor::zeros(&[b, lag, c]))?;
    let head = g.slice(x, 1, 0, t - lag)?;
    g.concat(&[pad, head], 1)
}

/// Left-padded causal convolution: `y_t = sum_i x_{t - i*dilation} W_i + b`.
/// The weight `[k * c, c_out]` stacks the taps, lag 0 first.
pub fn causal_conv(g: &mut Graph, prefix: &str, x: Var, kernel_size: usize, dilation: usize) -> Result<Var> {
    let taps: Vec<Var> = (0..kernel_size).map(|i| delay(g, x, i * dilation)).collect::<Result<_>>()?;
    let stacked = if kernel_size == 1 { taps[0] } else { g.concat(&taps, 2)? };
    nn::linear(g, prefix, stacked)
}

/// Input projection followed by residual blocks
/// `x + dropout(relu(conv_l(x)))` with dilation `base^l`.
pub fn tcn_forward(g: &mut Graph, prefix: &str, spec: &BackboneSpec, seq: Var) -> Result<Var> {
    check_seq(g, seq, "tcn")?;
    let mut x = nn::linear(g, &format!("{prefix}.input"), seq)?;
    for l in 0..spec.depth {
        let dilation = spec.dilation_base.pow(l as u32);
        let y = causal_conv(g, &format!("{prefix}.tcn{l}.conv"), x, spec.kernel_size, dilation)?;
        let y = g.relu(y);
        let y = g.dropout(y, spec.dropout)?;
        x = g.add(x, y)?;
    }
    Ok(x)
}

pub fn backbone_forward(g: &mut Graph, prefix: &str, spec: &BackboneSpec, seq: Var) -> Result<Var> {
    spec.validate()?;
    match spec.kind {
        BackboneKind::Gru => gru_forward(g, prefix, spec, seq),
        BackboneKind::Transformer => transformer_forward(g, prefix, spec, seq),
        BackboneKind::Tcn => tcn_forward(g, prefix, spec, seq),
    }
}

/// Head on backbone states `[B, T, h]`. Per-step gives `[B, T, out]`;
/// per-stay reads `hidden[b, steps[b]]` and gives `[B, out]`.
pub fn predict(g: &mut Graph, prefix: &str, spec: &BackboneSpec, hidden: Var, steps: &[usize]) -> Result<Var> {
    let (b, t, h) = check_seq(g, hidden, "predict")?;
    match spec.prediction {
        PredictionMode::PerStep => nn::linear(g, prefix, hidden),
        PredictionMode::PerStay => {
            if steps.len() != b {
                return Err(Error::Shape {
                    op: "predict",
                    detail: format!("{} step indices for batch of {b}", steps.len()),
                });
            }
            if let Some(&s) = steps.iter().find(|&&s| s >= t) {
                return Err(Error::Shape { op: "predict", detail: format!("step index {s} out of range for T = {t}") });
            }
            let flat = g.reshape(hidden, &[b * t, h])?;
            let rows: Vec<usize> = steps.iter().enumerate().map(|(i, &s)| i * t + s).collect();
            let picked = g.index_select(flat, 0, &rows)?;
            nn::linear(g, prefix, picked)
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::diffcore::{finite_diff_check, Mode};

    fn spec(kind: BackboneKind) -> BackboneSpec {
        BackboneSpec {
            kind,
            hidden_dim: 4,
            depth: 2,
            heads: 2,
            kernel_size: 2,
            dilation_base: 2,
            dropout: 0.0,
            attention_dropout: 0.0,
            head: HeadKind::Binary,
            prediction: PredictionMode::PerStep,
        }
    }

    fn run(p: &ParamStore, s: &BackboneSpec, b: usize, t: usize, e: usize, data: &[f64]) -> Vec<f64> {
        let mut g = Graph::new(p, Mode::Eval, 0);
        let x = g.constant(Tensor::new(vec![b, t, e], data.to_vec()).unwrap()).unwrap();
        let h = backbone_forward(&mut g, "bb", s, x).unwrap();
        assert_eq!(g.shape(h), &[b, t, s.hidden_dim]);
        g.value(h).data().to_vec()
    }

    #[test]
    fn gru_zero_weights_give_zero_state() {
        let s = spec(BackboneKind::Gru);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamStore::new();
        init_backbone(&mut p, "bb", &s, 3, &mut rng).unwrap();
        for (_, t) in p.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let out = run(&p, &s, 2, 5, 3, &vec![0.7; 30]);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_single_step_hand_computed() {
        // 1x1 gates: W = [w_r, w_z, w_n], U = [u_r, u_z, u_n]
        let mut s = spec(BackboneKind::Gru);
        s.hidden_dim = 1;
        s.depth = 1;
        let mut p = ParamStore::new();
        p.insert("bb.gru0.wx.weight", Tensor::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap());
        p.insert("bb.gru0.wx.bias", Tensor::vector(vec![0.1, 0.2, -0.3]));
        p.insert("bb.gru0.wh.weight", Tensor::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap());
        p.insert("bb.gru0.wh.bias", Tensor::vector(vec![0.0, 0.0, 0.4]));
        let x = 0.8;
        let out = run(&p, &s, 1, 1, 1, &[x]);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        // h0 = 0, so h U + c = c
        let r = sig(0.5 * x + 0.1);
        let z = sig(-x + 0.2);
        let n = (2.0 * x - 0.3 + r * 0.4).tanh();
        let want = (1.0 - z) * n;
        assert!((out[0] - want).abs() < 1e-15, "{} vs {want}", out[0]);
    }

    #[test]
    fn causality_all_backbones() {
        for kind in [BackboneKind::Gru, BackboneKind::Transformer, BackboneKind::Tcn] {
            let s = spec(kind);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut p = ParamStore::new();
            init_backbone(&mut p, "bb", &s, 3, &mut rng).unwrap();
            let (b, t, e) = (2, 8, 3);
            let data: Vec<f64> = (0..b * t * e).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let base = run(&p, &s, b, t, e, &data);
            for changed in [5, t - 1] {
                let mut d2 = data.clone();
                for bi in 0..b {
                    for j in 0..e {
                        d2[(bi * t + changed) * e + j] += 3.0;
                    }
                }
                let moved = run(&p, &s, b, t, e, &d2);
                for bi in 0..b {
                    for step in 0..changed {
                        let span = (bi * t + step) * 4..(bi * t + step + 1) * 4;
                        assert_eq!(base[span.clone()], moved[span], "{kind:?} step {step} vs change at {changed}");
                    }
                }
            }
        }
    }

    #[test]
    fn transformer_single_step_defined() {
        let s = spec(BackboneKind::Transformer);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParamStore::new();
        init_backbone(&mut p, "bb", &s, 3, &mut rng).unwrap();
        let out = run(&p, &s, 1, 1, 3, &[0.1, 0.2, 0.3]);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn transformer_future_weights_are_exactly_zero() {
        let s = spec(BackboneKind::Transformer);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamStore::new();
        init_backbone(&mut p, "bb", &s, 3, &mut rng).unwrap();
        let mut g = Graph::new(&p, Mode::Eval, 0);
        let x = g.constant(Tensor::full(&[1, 5, 4], 0.3)).unwrap();
        let out = nn::transformer_block(&mut g, "bb.block0", x, &s.block_spec(), QueryRows::All).unwrap();
        let att = g.value(out.attention).data();
        for (r, row) in att.chunks(5).enumerate() {
            let i = r % 5;
            assert!(row[i + 1..].iter().all(|&w| w == 0.0));
        }
    }

    #[test]
    fn tcn_receptive_field() {
        let mut s = spec(BackboneKind::Tcn);
        s.kernel_size = 2;
        s.dilation_base = 2;
        s.depth = 2;
        assert_eq!(s.receptive_field(), 4);
        assert_eq!(tcn_depth_for(16, 2, 2), 4);
        assert_eq!(tcn_depth_for(4, 2, 2), 2);
        s.depth = tcn_depth_for(64, 2, 2);
        assert!(s.receptive_field() >= 64);
    }

    #[test]
    fn lag_zero_only_conv_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ParamStore::new();
        p.init_linear("c", 6, 3, &mut rng);
        // taps 1 (rows 3..6) zeroed; the lag-0 tap is the identity
        let mut w = vec![0.0; 18];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        p.insert("c.weight", Tensor::new(vec![6, 3], w).unwrap());
        let mut g = Graph::new(&p, Mode::Eval, 0);
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = g.constant(Tensor::new(vec![1, 4, 3], data.clone()).unwrap()).unwrap();
        let y = causal_conv(&mut g, "c", x, 2, 1).unwrap();
        let bias = p.get("c.bias").unwrap().data().to_vec();
        for (i, v) in g.value(y).data().iter().enumerate() {
            assert!((v - (data[i] + bias[i % 3])).abs() < 1e-15);
        }
    }

    #[test]
    fn tcn_zero_blocks_reduce_to_input_projection() {
        let s = spec(BackboneKind::Tcn);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ParamStore::new();
        init_backbone(&mut p, "bb", &s, 3, &mut rng).unwrap();
        for l in 0..s.depth {
            for w in ["weight", "bias"] {
                p.get_mut(&format!("bb.tcn{l}.conv.{w}")).unwrap().data_mut().fill(0.0);
            }
        }
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = run(&p, &s, 1, 4, 3, &data);
        let mut g = Graph::new(&p, Mode::Eval, 0);
        let x = g.constant(Tensor::new(vec![1, 4, 3], data).unwrap()).unwrap();
        let proj = nn::linear(&mut g, "bb.input", x).unwrap();
        assert_eq!(out, g.value(proj).data());
    }

    #[test]
    fn head_modes_and_shapes() {
        let mut s = spec(BackboneKind::Gru);
        s.head = HeadKind::Multiclass { classes: 15 };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = ParamStore::new();
        init_head(&mut p, "head", &s, &mut rng);
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new(&p, Mode::Eval, 0);
        let hidden = g.constant(Tensor::new(vec![1, 3, 4], data).unwrap()).unwrap();
        let per_step = predict(&mut g, "head", &s, hidden, &[]).unwrap();
        assert_eq!(g.shape(per_step), &[1, 3, 15]);
        s.prediction = PredictionMode::PerStay;
        let per_stay = predict(&mut g, "head", &s, hidden, &[2]).unwrap();
        assert_eq!(g.shape(per_stay), &[1, 15]);
        assert_eq!(g.value(per_stay).data(), &g.value(per_step).data()[30..45]);
        assert!(predict(&mut g, "head", &s, hidden, &[3]).is_err());
    }

    #[test]
    fn zero_head_weights_emit_bias() {
        let s = spec(BackboneKind::Gru);
        let mut p = ParamStore::new();
        p.insert("head.weight", Tensor::zeros(&[4, 1]));
        p.insert("head.bias", Tensor::vector(vec![0.25]));
        let mut g = Graph::new(&p, Mode::Eval, 0);
        let hidden = g.constant(Tensor::full(&[2, 3, 4], 1.7)).unwrap();
        let y = predict(&mut g, "head", &s, hidden, &[]).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        for kind in [BackboneKind::Gru, BackboneKind::Transformer, BackboneKind::Tcn] {
            let s = spec(kind);
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut p = ParamStore::new();
            init_backbone(&mut p, "bb", &s, 3, &mut rng).unwrap();
            init_head(&mut p, "head", &s, &mut rng);
            let data: Vec<f64> = (0..2 * 4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..8).map(|i| (i % 3 == 0) as u8 as f64).collect();
            let err = finite_diff_check(
                |g| {
                    let x = g.constant(Tensor::new(vec![2, 4, 3], data.clone())?)?;
                    let h = backbone_forward(g, "bb", &s, x)?;
                    let logits = predict(g, "head", &s, h, &[])?;
                    g.bce_with_logits(logits, &y, &[true; 8])
                },
                &p,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-6, "{kind:?}: {err}");
        }
    }
}
