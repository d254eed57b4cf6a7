//! Dense numeric kernels shared by forward and backward passes.

/// Strided view of a row-major matrix: `(rows, cols, row_stride, col_stride)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatView {
    pub fn dense(rows: usize, cols: usize) -> Self {
        Self { rows, cols, rs: cols as isize, cs: 1 }
    }

    /// The transpose of a dense `rows x cols` matrix, without moving data.
    pub fn dense_t(rows: usize, cols: usize) -> Self {
        Self { rows: cols, cols: rows, rs: 1, cs: cols as isize }
    }
}

const SMALL_GEMM: usize = 4096;

/// `c += a * b` where `c` is dense `a.rows x b.cols`.
pub(crate) fn gemm_acc(a: &[f64], av: MatView, b: &[f64], bv: MatView, c: &mut [f64]) {
    let (m, k, n) = (av.rows, av.cols, bv.cols);
    assert_eq!(k, bv.rows);
    assert!(c.len() >= m * n);
    assert!(max_offset(av) < a.len() && max_offset(bv) < b.len());
    if m * k * n <= SMALL_GEMM {
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[(i as isize * av.rs + p as isize * av.cs) as usize];
                if aip == 0.0 {
                    continue;
                }
                if bv.cs == 1 {
                    let start = (p as isize * bv.rs) as usize;
                    for (cj, bj) in crow.iter_mut().zip(&b[start..start + n]) {
                        *cj += aip * bj;
                    }
                } else {
                    for (j, cj) in crow.iter_mut().enumerate() {
                        *cj += aip * b[(p as isize * bv.rs + j as isize * bv.cs) as usize];
                    }
                }
            }
        }
        return;
    }
    // SAFETY: the asserts above bound every offset the kernel can touch inside
    // `a`, `b` and `c`; `c` is dense with `m * n` elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn max_offset(v: MatView) -> usize {
    if v.rows == 0 || v.cols == 0 {
        return 0;
    }
    ((v.rows - 1) as isize * v.rs + (v.cols - 1) as isize * v.cs) as usize
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(-|x|))`, the stable tail of softplus.
pub(crate) fn log1p_exp_neg_abs(x: f64) -> f64 {
    (-x.abs()).exp().ln_1p()
}

/// Counter-based uniform generator: one splitmix64 hash per draw, so a run
/// is reproducible from `(seed, counter)` alone.
pub(crate) fn counter_uniform(seed: u64, counter: u64) -> f64 {
    let mut z = seed ^ counter.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn small_and_large_paths_agree_with_naive() {
        for &(m, k, n) in &[(2, 3, 4), (40, 30, 20)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
            let mut c = vec![0.0; m * n];
            gemm_acc(&a, MatView::dense(m, k), &b, MatView::dense(k, n), &mut c);
            let want = naive(&a, m, k, &b, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_view() {
        // a is stored as k x m; use its transpose
        let (m, k, n) = (3, 2, 2);
        let at = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0];
        let mut c = vec![0.0; m * n];
        gemm_acc(&at, MatView::dense_t(k, m), &b, MatView::dense(k, n), &mut c);
        assert_eq!(c, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn counter_uniform_in_unit_interval() {
        for i in 0..1000 {
            let u = counter_uniform(7, i);
            assert!((0.0..1.0).contains(&u));
        }
        assert_eq!(counter_uniform(1, 2), counter_uniform(1, 2));
        assert_ne!(counter_uniform(1, 2), counter_uniform(2, 2));
    }
}
