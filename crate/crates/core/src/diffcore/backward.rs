use super::kernels::{self, MatView};
use super::tape::{permute_data, Op, Tape, Var};
use crate::error::{Error, Result};

fn slot(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut Vec<f64> {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

/// Accumulates `g` (shaped like the lhs) into the gradient of a
/// suffix-broadcast rhs by summing over the leading axes.
fn acc_broadcast(dst: &mut [f64], g: &[f64], f: impl Fn(usize, f64) -> f64) {
    let nb = dst.len();
    for (chunk_i, chunk) in g.chunks(nb).enumerate() {
        for (j, (d, &gv)) in dst.iter_mut().zip(chunk).enumerate() {
            *d += f(chunk_i * nb + j, gv);
        }
    }
}

impl Tape {
    /// Reverse accumulation from a scalar `loss`. Gradients are stored on the
    /// tape and read back with [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::BackwardBeforeForward);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::LossNotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        let len = |i: usize| nodes[i].value.len();
        let rg = |i: usize| nodes[i].requires_grad;

        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let g = match &nodes[i].op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            let out = nodes[i].value.data();
            match &nodes[i].op {
                Op::Leaf => unreachable!(),
                Op::Reshape(a) => {
                    let d = slot(&mut grads, *a, len(*a));
                    d.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                }
                &Op::MatMul { a, b, rows, inner, cols } => {
                    if rg(a) {
                        let bv = nodes[b].value.data();
                        let d = slot(&mut grads, a, len(a));
                        kernels::gemm_acc(&g, MatView::dense(rows, cols), bv, MatView::dense_t(inner, cols), d);
                    }
                    if rg(b) {
                        let av = nodes[a].value.data();
                        let d = slot(&mut grads, b, len(b));
                        kernels::gemm_acc(av, MatView::dense_t(rows, inner), &g, MatView::dense(rows, cols), d);
                    }
                }
                &Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
                    let (sa, sb, sg) = (m * k, k * n, m * n);
                    if rg(a) {
                        let bv = nodes[b].value.data();
                        let d = slot(&mut grads, a, len(a));
                        // dA = G B^T  (or G B when b was transposed)
                        let bview = if trans_b { MatView::dense(n, k) } else { MatView::dense_t(k, n) };
                        for t in 0..batch {
                            kernels::gemm_acc(
                                &g[t * sg..(t + 1) * sg],
                                MatView::dense(m, n),
                                &bv[t * sb..(t + 1) * sb],
                                bview,
                                &mut d[t * sa..(t + 1) * sa],
                            );
                        }
                    }
                    if rg(b) {
                        let av = nodes[a].value.data();
                        let d = slot(&mut grads, b, len(b));
                        for t in 0..batch {
                            let (ga, aa) = (&g[t * sg..(t + 1) * sg], &av[t * sa..(t + 1) * sa]);
                            let db = &mut d[t * sb..(t + 1) * sb];
                            if trans_b {
                                // dB = G^T A, shape n x k
                                kernels::gemm_acc(ga, MatView::dense_t(m, n), aa, MatView::dense(m, k), db);
                            } else {
                                // dB = A^T G, shape k x n
                                kernels::gemm_acc(aa, MatView::dense_t(m, k), ga, MatView::dense(m, n), db);
                            }
                        }
                    }
                }
                &Op::Add(a, b) | &Op::Sub(a, b) => {
                    let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if rg(a) {
                        let d = slot(&mut grads, a, len(a));
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                    }
                    if rg(b) {
                        let d = slot(&mut grads, b, len(b));
                        acc_broadcast(d, &g, |_, gv| sign * gv);
                    }
                }
                &Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
                    if rg(a) {
                        let nb = bv.len();
                        let d = slot(&mut grads, a, len(a));
                        for (j, (d, gv)) in d.iter_mut().zip(&g).enumerate() {
                            *d += gv * bv[j % nb];
                        }
                    }
                    if rg(b) {
                        let d = slot(&mut grads, b, len(b));
                        acc_broadcast(d, &g, |j, gv| gv * av[j]);
                    }
                }
                &Op::Scale(a, c) => {
                    let d = slot(&mut grads, a, len(a));
                    d.iter_mut().zip(&g).for_each(|(d, g)| *d += c * g);
                }
                &Op::Relu(a) => {
                    let av = nodes[a].value.data();
                    let d = slot(&mut grads, a, len(a));
                    for ((d, gv), x) in d.iter_mut().zip(&g).zip(av) {
                        if *x > 0.0 {
                            *d += gv;
                        }
                    }
                }
                &Op::Gelu(a) => {
                    let av = nodes[a].value.data();
                    let d = slot(&mut grads, a, len(a));
                    for ((d, gv), x) in d.iter_mut().zip(&g).zip(av) {
                        *d += gv * kernels::gelu_grad(*x);
                    }
                }
                &Op::Sigmoid(a) => {
                    let d = slot(&mut grads, a, len(a));
                    for ((d, gv), y) in d.iter_mut().zip(&g).zip(out) {
                        *d += gv * y * (1.0 - y);
                    }
                }
                &Op::Tanh(a) => {
                    let d = slot(&mut grads, a, len(a));
                    for ((d, gv), y) in d.iter_mut().zip(&g).zip(out) {
                        *d += gv * (1.0 - y * y);
                    }
                }
                &Op::Softmax { a, width } => {
                    let d = slot(&mut grads, a, len(a));
                    for ((drow, grow), yrow) in d.chunks_mut(width).zip(g.chunks(width)).zip(out.chunks(width)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for ((d, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gv - dot);
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, width, xhat, rstd } => {
                    let (x, gamma, beta, width) = (*x, *gamma, *beta, *width);
                    let gm = nodes[gamma].value.data();
                    if rg(x) {
                        let d = slot(&mut grads, x, len(x));
                        let mut dy = vec![0.0; width];
                        for (r, &rs) in rstd.iter().enumerate() {
                            let span = r * width..(r + 1) * width;
                            let (grow, hrow) = (&g[span.clone()], &xhat[span.clone()]);
                            for j in 0..width {
                                dy[j] = grow[j] * gm[j];
                            }
                            let mean_dy = dy.iter().sum::<f64>() / width as f64;
                            let mean_dyh = dy.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / width as f64;
                            for (j, dst) in d[span].iter_mut().enumerate() {
                                *dst += rs * (dy[j] - mean_dy - hrow[j] * mean_dyh);
                            }
                        }
                    }
                    if rg(gamma) {
                        let d = slot(&mut grads, gamma, width);
                        acc_broadcast(d, &g, |j, gv| gv * xhat[j]);
                    }
                    if rg(beta) {
                        let d = slot(&mut grads, beta, width);
                        acc_broadcast(d, &g, |_, gv| gv);
                    }
                }
                Op::Dropout { a, mask } => {
                    let d = slot(&mut grads, *a, len(*a));
                    for ((d, gv), m) in d.iter_mut().zip(&g).zip(mask) {
                        *d += gv * m;
                    }
                }
                Op::Concat { inputs, outer, chunks } => {
                    let total: usize = chunks.iter().sum();
                    let mut off = 0;
                    for (&inp, &c) in inputs.iter().zip(chunks) {
                        if rg(inp) {
                            let d = slot(&mut grads, inp, len(inp));
                            for o in 0..*outer {
                                let src = &g[o * total + off..o * total + off + c];
                                d[o * c..(o + 1) * c].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                            }
                        }
                        off += c;
                    }
                }
                &Op::Slice { a, outer, in_chunk, offset, out_chunk } => {
                    let d = slot(&mut grads, a, len(a));
                    for o in 0..outer {
                        let dst = &mut d[o * in_chunk + offset..o * in_chunk + offset + out_chunk];
                        dst.iter_mut().zip(&g[o * out_chunk..(o + 1) * out_chunk]).for_each(|(d, s)| *d += s);
                    }
                }
                &Op::Reduce { a, outer, axis_len, inner, mean } => {
                    let scale = if mean { 1.0 / axis_len as f64 } else { 1.0 };
                    let d = slot(&mut grads, a, len(a));
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for k in 0..axis_len {
                            let base = (o * axis_len + k) * inner;
                            d[base..base + inner].iter_mut().zip(src).for_each(|(d, s)| *d += scale * s);
                        }
                    }
                }
                Op::IndexSelect { a, outer, axis_len, inner, indices } => {
                    let (outer, axis_len, inner) = (*outer, *axis_len, *inner);
                    let d = slot(&mut grads, *a, len(*a));
                    let per = indices.len() * inner;
                    for o in 0..outer {
                        for (p, &idx) in indices.iter().enumerate() {
                            let src = &g[o * per + p * inner..o * per + (p + 1) * inner];
                            let base = (o * axis_len + idx) * inner;
                            d[base..base + inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                }
                Op::Permute { a, in_shape, perm } => {
                    let back = permute_data(&g, in_shape, perm, true);
                    let d = slot(&mut grads, *a, len(*a));
                    d.iter_mut().zip(&back).for_each(|(d, s)| *d += s);
                }
                &Op::FeatureTokenize { x, w, b, d: nfeat, m } => {
                    let xv = nodes[x].value.data();
                    if rg(x) {
                        let wv = nodes[w].value.data();
                        let dx = slot(&mut grads, x, len(x));
                        for (t, dxt) in dx.iter_mut().enumerate() {
                            let j = t % nfeat;
                            *dxt += g[t * m..(t + 1) * m]
                                .iter()
                                .zip(&wv[j * m..(j + 1) * m])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                    }
                    if rg(w) {
                        let dw = slot(&mut grads, w, nfeat * m);
                        for (t, &xt) in xv.iter().enumerate() {
                            let j = t % nfeat;
                            dw[j * m..(j + 1) * m]
                                .iter_mut()
                                .zip(&g[t * m..(t + 1) * m])
                                .for_each(|(d, s)| *d += xt * s);
                        }
                    }
                    if rg(b) {
                        let db = slot(&mut grads, b, nfeat * m);
                        acc_broadcast(db, &g, |_, s| s);
                    }
                }
                Op::BceWithLogits { logits, targets, mask, count } => {
                    if *count > 0 {
                        let lv = nodes[*logits].value.data();
                        let scale = g[0] / *count as f64;
                        let d = slot(&mut grads, *logits, lv.len());
                        for (j, dst) in d.iter_mut().enumerate() {
                            if mask[j] {
                                *dst += scale * (kernels::sigmoid(lv[j]) - targets[j]);
                            }
                        }
                    }
                }
                Op::SoftmaxCrossEntropy { logits, targets, mask, classes, probs, count } => {
                    if *count > 0 {
                        let scale = g[0] / *count as f64;
                        let d = slot(&mut grads, *logits, probs.len());
                        for (r, (drow, prow)) in d.chunks_mut(*classes).zip(probs.chunks(*classes)).enumerate() {
                            if !mask[r] {
                                continue;
                            }
                            for (c, (dst, p)) in drow.iter_mut().zip(prow).enumerate() {
                                let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                                *dst += scale * (p - onehot);
                            }
                        }
                    }
                }
                Op::AbsError { pred, targets, mask, count } => {
                    if *count > 0 {
                        let pv = nodes[*pred].value.data();
                        let scale = g[0] / *count as f64;
                        let d = slot(&mut grads, *pred, pv.len());
                        for (j, dst) in d.iter_mut().enumerate() {
                            let diff = pv[j] - targets[j];
                            if mask[j] && diff != 0.0 {
                                *dst += scale * diff.signum();
                            }
                        }
                    }
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}
