use std::fmt;

use super::kernels::{self, MatView};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train mode enables dropout; eval mode makes every op a pure function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Reshape(usize),
    MatMul {
        a: usize,
        b: usize,
        rows: usize,
        inner: usize,
        cols: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softmax {
        a: usize,
        width: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        width: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout {
        a: usize,
        mask: Vec<f64>,
    },
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Slice {
        a: usize,
        outer: usize,
        in_chunk: usize,
        offset: usize,
        out_chunk: usize,
    },
    Reduce {
        a: usize,
        outer: usize,
        axis_len: usize,
        inner: usize,
        mean: bool,
    },
    IndexSelect {
        a: usize,
        outer: usize,
        axis_len: usize,
        inner: usize,
        indices: Vec<usize>,
    },
    Permute {
        a: usize,
        in_shape: Vec<usize>,
        perm: Vec<usize>,
    },
    FeatureTokenize {
        x: usize,
        w: usize,
        b: usize,
        d: usize,
        m: usize,
    },
    BceWithLogits {
        logits: usize,
        targets: Vec<f64>,
        mask: Vec<bool>,
        count: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
        classes: usize,
        probs: Vec<f64>,
        count: usize,
    },
    AbsError {
        pred: usize,
        targets: Vec<f64>,
        mask: Vec<bool>,
        count: usize,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Reshape(_) => "reshape",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch-matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "multiply",
            Op::Scale(..) => "scalar-scale",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer-norm",
            Op::Dropout { .. } => "dropout",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reduce { mean: true, .. } => "reduce-mean",
            Op::Reduce { mean: false, .. } => "reduce-sum",
            Op::IndexSelect { .. } => "embedding-select",
            Op::Permute { .. } => "transpose",
            Op::FeatureTokenize { .. } => "feature-tokenize",
            Op::BceWithLogits { .. } => "bce-with-logits",
            Op::SoftmaxCrossEntropy { .. } => "softmax-cross-entropy",
            Op::AbsError { .. } => "abs-error",
        }
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Ordered record of executed ops. Nodes are appended in execution order, so
/// every node's inputs precede it and reverse iteration is a valid
/// topological order for backpropagation.
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    mode: Mode,
    dropout_seed: u64,
    dropout_counter: u64,
    pub(crate) grads: Vec<Option<Vec<f64>>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).field("mode", &self.mode).finish()
    }
}

impl Tape {
    pub fn new(mode: Mode) -> Self {
        Self::with_seed(mode, 0)
    }

    pub fn with_seed(mode: Mode, dropout_seed: u64) -> Self {
        Self { nodes: Vec::new(), mode, dropout_seed, dropout_counter: 0, grads: Vec::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Kind of the op that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Input data that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::NonFinite("constant input".into()));
        }
        Ok(self.push(t, Op::Leaf, false))
    }

    /// A leaf whose gradient is tracked.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::NonFinite("parameter".into()));
        }
        Ok(self.push(t, Op::Leaf, true))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshape(shape)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::Reshape(a.0), rg))
    }

    /// `a[..., k] @ b[k, n]`: leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.last() != Some(&sb[0]) {
            return shape_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let (inner, cols) = (sb[0], sb[1]);
        let rows = self.value(a).len() / inner;
        let mut out = vec![0.0; rows * cols];
        kernels::gemm_acc(
            self.value(a).data(),
            MatView::dense(rows, inner),
            self.value(b).data(),
            MatView::dense(inner, cols),
            &mut out,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = cols;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a: a.0, b: b.0, rows, inner, cols }, rg))
    }

    /// Batched product over matching leading axes: `[.., m, k] @ [.., k, n]`,
    /// or `[.., m, k] @ [.., n, k]^T` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ra = sa.len();
        if ra < 2 || sb.len() != ra || sa[..ra - 2] != sb[..ra - 2] {
            return shape_err("batch-matmul", format!("{sa:?} x {sb:?}"));
        }
        let (m, k) = (sa[ra - 2], sa[ra - 1]);
        let (bk, n) = if trans_b { (sb[ra - 1], sb[ra - 2]) } else { (sb[ra - 2], sb[ra - 1]) };
        if bk != k {
            return shape_err("batch-matmul", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
        }
        let batch: usize = sa[..ra - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let bview = if trans_b { MatView::dense_t(n, k) } else { MatView::dense(k, n) };
        {
            let (av, bvv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                kernels::gemm_acc(
                    &av[i * m * k..(i + 1) * m * k],
                    MatView::dense(m, k),
                    &bvv[i * k * n..(i + 1) * k * n],
                    bview,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let mut shape = sa;
        shape[ra - 1] = n;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::BatchMatMul { a: a.0, b: b.0, batch, m, k, n, trans_b }, rg))
    }

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return shape_err(op, format!("{sa:?} with {sb:?} (rhs must match a trailing suffix)"));
        }
        Ok(())
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_suffix(op_name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let nb = vb.len();
        let out: Vec<f64> =
            va.data().chunks(nb).flat_map(|chunk| chunk.iter().zip(vb.data()).map(move |(&x, &y)| f(x, y))).collect();
        Ok(Tensor::from_parts(va.shape().to_vec(), out))
    }

    /// Elementwise `a + b`; `b` may match a trailing suffix of `a`'s shape and
    /// is then broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(t, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(t, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("multiply", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(t, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| x * c);
        let rg = self.rg(&[a.0]);
        self.push(t, Op::Scale(a.0, c), rg)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        let rg = self.rg(&[a.0]);
        self.push(t, Op::Relu(a.0), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.map(a, kernels::gelu);
        let rg = self.rg(&[a.0]);
        self.push(t, Op::Gelu(a.0), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, kernels::sigmoid);
        let rg = self.rg(&[a.0]);
        self.push(t, Op::Sigmoid(a.0), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::tanh);
        let rg = self.rg(&[a.0]);
        self.push(t, Op::Tanh(a.0), rg)
    }

    /// Softmax over the last axis. With `causal`, the last two axes are a
    /// square score matrix and entries above the diagonal get exactly zero
    /// weight.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let width = *shape.last().unwrap();
        if causal && (shape.len() < 2 || shape[shape.len() - 2] != width) {
            return shape_err("softmax", format!("causal mask needs square trailing axes, got {shape:?}"));
        }
        let mut out = self.value(a).data().to_vec();
        for (r, row) in out.chunks_mut(width).enumerate() {
            let valid = if causal { r % width + 1 } else { width };
            let (live, masked) = row.split_at_mut(valid);
            let max = live.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in live.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in live.iter_mut() {
                *v /= sum;
            }
            masked.fill(0.0);
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { a: a.0, width }, rg))
    }

    /// Normalizes over the last axis, then applies `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().unwrap();
        if self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return shape_err(
                "layer-norm",
                format!("x {shape:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            );
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / width;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..width {
                let h = (row[j] - mean) * rs;
                xhat[r * width + j] = h;
                out[r * width + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, width, xhat, rstd },
            rg,
        ))
    }

    /// Inverted dropout; the identity in eval mode or at rate 0.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|i| {
                let u = kernels::counter_uniform(self.dropout_seed, self.dropout_counter + i as u64);
                if u < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        self.dropout_counter += n as u64;
        let va = self.value(a);
        let out = va.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), out);
        let rg = self.rg(&[a.0]);
        Ok(self.push(t, Op::Dropout { a: a.0, mask }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => return shape_err("concat", "no inputs"),
        };
        if axis >= first.len() {
            return shape_err("concat", format!("axis {axis} for shape {first:?}"));
        }
        let mut axis_total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return shape_err("concat", format!("{first:?} vs {s:?} along axis {axis}"));
            }
            axis_total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let chunks: Vec<usize> = inputs.iter().map(|v| self.value(*v).len() / outer).collect();
        let total_chunk: usize = chunks.iter().sum();
        let mut out = Vec::with_capacity(outer * total_chunk);
        for o in 0..outer {
            for (v, &c) in inputs.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(*v).data()[o * c..(o + 1) * c]);
            }
        }
        let mut shape = first;
        shape[axis] = axis_total;
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { inputs: ids, outer, chunks }, rg))
    }

    /// Keeps `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return shape_err("slice", format!("{start}..{end} on axis {axis} of {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let in_chunk = shape[axis] * inner;
        let out_chunk = (end - start) * inner;
        let offset = start * inner;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * out_chunk);
        for o in 0..outer {
            out.extend_from_slice(&src[o * in_chunk + offset..o * in_chunk + offset + out_chunk]);
        }
        let mut oshape = shape;
        oshape[axis] = end - start;
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::Slice { a: a.0, outer, in_chunk, offset, out_chunk }, rg))
    }

    fn reduce(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return shape_err("reduce", format!("axis {axis} of {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..axis_len {
                let base = (o * axis_len + k) * inner;
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(&src[base..base + inner]) {
                    *dst += s;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= axis_len as f64);
        }
        let mut oshape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if oshape.is_empty() {
            oshape.push(1);
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::Reduce { a: a.0, outer, axis_len, inner, mean }, rg))
    }

    pub fn reduce_sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, false)
    }

    pub fn reduce_mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, true)
    }

    /// Sum of every element, as a shape-`[1]` scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let flat = self.reshape(a, &[n])?;
        self.reduce_sum(flat, 0)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let flat = self.reshape(a, &[n])?;
        self.reduce_mean(flat, 0)
    }

    /// Gathers the listed positions along `axis`; indices may repeat.
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || indices.is_empty() {
            return shape_err("embedding-select", format!("axis {axis} of {shape:?}"));
        }
        let axis_len = shape[axis];
        if let Some(bad) = indices.iter().find(|&&i| i >= axis_len) {
            return shape_err("embedding-select", format!("index {bad} out of range {axis_len}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * axis_len + i) * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut oshape = shape;
        oshape[axis] = indices.len();
        let rg = self.rg(&[a.0]);
        Ok(self.push(
            Tensor::from_parts(oshape, out),
            Op::IndexSelect { a: a.0, outer, axis_len, inner, indices: indices.to_vec() },
            rg,
        ))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        let mut seen = vec![false; in_shape.len()];
        if perm.len() != in_shape.len()
            || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true))
        {
            return shape_err("transpose", format!("permutation {perm:?} for {in_shape:?}"));
        }
        let out = permute_data(self.value(a).data(), &in_shape, perm, false);
        let oshape = perm.iter().map(|&p| in_shape[p]).collect();
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::Permute { a: a.0, in_shape, perm: perm.to_vec() }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return shape_err("transpose", format!("rank {r}"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// `x[.., d]` -> tokens `[.., d, m]` with token `j = x_j * w[j] + b[j]`.
    pub fn feature_tokenize(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let d = *sx.last().unwrap();
        if sw.len() != 2 || sw[0] != d || self.shape(b) != sw.as_slice() {
            return shape_err("feature-tokenize", format!("x {sx:?}, W {sw:?}, b {:?}", self.shape(b)));
        }
        let m = sw[1];
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = Vec::with_capacity(xv.len() * m);
        for (i, &xi) in xv.iter().enumerate() {
            let j = i % d;
            out.extend(wv[j * m..(j + 1) * m].iter().zip(&bv[j * m..(j + 1) * m]).map(|(w, b)| xi * w + b));
        }
        let mut shape = sx;
        shape.push(m);
        let rg = self.rg(&[x.0, w.0, b.0]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::FeatureTokenize { x: x.0, w: w.0, b: b.0, d, m }, rg))
    }

    fn check_loss_inputs(&self, op: &'static str, v: Var, n_targets: usize, n_mask: usize) -> Result<()> {
        let val = self.value(v);
        if !val.is_finite() {
            return Err(Error::NonFinite(format!("{op} logits")));
        }
        if n_targets != n_mask {
            return shape_err(op, format!("{n_targets} targets vs {n_mask} mask entries"));
        }
        Ok(())
    }

    /// Mean binary cross-entropy with logits over entries where `mask` holds.
    /// An all-false mask gives a zero loss.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], mask: &[bool]) -> Result<Var> {
        self.check_loss_inputs("bce-with-logits", logits, targets.len(), mask.len())?;
        if self.value(logits).len() != targets.len() {
            return shape_err(
                "bce-with-logits",
                format!("{:?} logits vs {} targets", self.shape(logits), targets.len()),
            );
        }
        let lv = self.value(logits).data();
        let mut total = 0.0;
        let mut count = 0;
        for ((&l, &y), &m) in lv.iter().zip(targets).zip(mask) {
            if m {
                total += l.max(0.0) - l * y + kernels::log1p_exp_neg_abs(l);
                count += 1;
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits { logits: logits.0, targets: targets.to_vec(), mask: mask.to_vec(), count },
            rg,
        ))
    }

    /// Mean softmax cross-entropy for `[n, C]` logits against class ids.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        self.check_loss_inputs("softmax-cross-entropy", logits, targets.len(), mask.len())?;
        let classes = *self.shape(logits).last().unwrap();
        if self.value(logits).len() != targets.len() * classes {
            return shape_err(
                "softmax-cross-entropy",
                format!("{:?} logits vs {} targets", self.shape(logits), targets.len()),
            );
        }
        if let Some(bad) = targets.iter().zip(mask).find(|(&t, &m)| m && t >= classes) {
            return shape_err("softmax-cross-entropy", format!("class {} >= {classes}", bad.0));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        let mut count = 0;
        for (i, row) in lv.chunks(classes).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (p, v) in probs[i * classes..(i + 1) * classes].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            if mask[i] {
                total += lse - row[targets[i]];
                count += 1;
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                classes,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Mean absolute error over masked entries; the subgradient at zero error is 0.
    pub fn abs_error(&mut self, pred: Var, targets: &[f64], mask: &[bool]) -> Result<Var> {
        self.check_loss_inputs("abs-error", pred, targets.len(), mask.len())?;
        if self.value(pred).len() != targets.len() {
            return shape_err("abs-error", format!("{:?} predictions vs {} targets", self.shape(pred), targets.len()));
        }
        let pv = self.value(pred).data();
        let mut total = 0.0;
        let mut count = 0;
        for ((&p, &y), &m) in pv.iter().zip(targets).zip(mask) {
            if m {
                total += (p - y).abs();
                count += 1;
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let rg = self.rg(&[pred.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::AbsError { pred: pred.0, targets: targets.to_vec(), mask: mask.to_vec(), count },
            rg,
        ))
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any
    /// flowed there.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref()).map(|g| Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    /// Like [`Tape::grad`] but returns exact zeros for nodes the loss does not
    /// depend on.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }
}

/// Moves `src` (shaped `in_shape`) into permuted order, or with `inverse`
/// scatters a permuted buffer back into `in_shape` order.
pub(crate) fn permute_data(src: &[f64], in_shape: &[usize], perm: &[usize], inverse: bool) -> Vec<f64> {
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![0.0; src.len()];
    let mut idx = vec![0usize; rank];
    let mut in_off = 0usize;
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut o = 0;
    while o < src.len() {
        for j in 0..inner {
            if inverse {
                out[in_off + j * inner_stride] = src[o + j];
            } else {
                out[o + j] = src[in_off + j * inner_stride];
            }
        }
        o += inner;
        // odometer over all but the last output axis
        let mut ax = rank - 1;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            in_off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            in_off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
