//! Raw numeric kernels shared by the eager API and the tape.

pub(crate) const LAYER_NORM_EPS: f64 = 1e-10;

/// `c (+)= op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// A transposed operand is stored in its untransposed row-major layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above and strides describe
    // row-major layouts that stay inside each slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// In-place softmax over rows of width `n`.
///
/// With `causal = Some(m)` the buffer is a stack of `m x n` blocks and
/// row `i` of each block only keeps columns `j <= i`; masked weights are
/// exactly zero.
pub(crate) fn softmax_rows(data: &mut [f64], n: usize, causal: Option<usize>) {
    if n == 0 {
        return;
    }
    for (r, row) in data.chunks_mut(n).enumerate() {
        let limit = match causal {
            Some(m) => (r % m + 1).min(n),
            None => n,
        };
        let (live, masked) = row.split_at_mut(limit);
        let max = live.iter().copied().fold(f64::NEG_INFINITY, f64::max);
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
}

/// Normalizes each row to zero mean and unit variance. Returns the
/// per-row inverse standard deviations.
pub(crate) fn layer_norm_rows(data: &mut [f64], n: usize) -> Vec<f64> {
    let mut inv = Vec::with_capacity(data.len() / n.max(1));
    for row in data.chunks_mut(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv.push(is);
    }
    inv
}
