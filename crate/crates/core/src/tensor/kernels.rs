//! Slice-level numeric kernels shared by the tape and the cached decoder.
//!
//! Every kernel here computes each output row independently of the other
//! rows, so a row produced during incremental decoding matches the same row
//! of a full forward pass.

/// `c = a · b (+ beta · c)` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        }
        return;
    }
    debug_assert!(a.len() >= span(m, k, rsa, csa));
    debug_assert!(b.len() >= span(k, n, rsb, csb));
    debug_assert!(c.len() >= span(m, n, rsc, csc));
    // SAFETY: the strides describe regions that fit inside the slices
    // (checked above in debug builds and by every caller's shape checks).
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
            rsc,
            csc,
        );
    }
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs + 1) as usize
}

/// Row-major `[m,k] · [k,n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, k as isize, 1, b, n as isize, 1, 0.0, &mut c, n as isize, 1);
    c
}

/// Row-major `[m,k] · [n,k]ᵀ`.
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, k as isize, 1, b, 1, k as isize, 0.0, &mut c, n as isize, 1);
    c
}

pub fn add_row_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
}

/// Layer normalisation over the last axis. Returns `(out, mean, rstd)`.
pub fn layer_norm(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = gain.len();
    let rows = x.len() / n;
    let mut out = vec![0.0; x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for (row, dst) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for (i, d) in dst.iter_mut().enumerate() {
            *d = (row[i] - mean) * rstd * gain[i] + bias[i];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

/// In-place stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Stable log-softmax of one row into `dst`.
pub fn log_softmax_row(row: &[f64], dst: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    for (d, v) in dst.iter_mut().zip(row) {
        *d = v - lse;
    }
}

/// Causal multi-head attention for a single query against `n_keys` cached
/// rows of packed `[q | k | v]` activations (row stride `3 * d`).
///
/// Writes the `d`-wide context vector into `out` and, when given, the
/// per-head attention weights (`heads * n_keys`) into `probs`.
pub fn attend(
    query: &[f64],
    packed: &[f64],
    n_keys: usize,
    heads: usize,
    out: &mut [f64],
    mut probs: Option<&mut [f64]>,
) {
    let d = out.len();
    let dh = d / heads;
    let stride = 3 * d;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut weights = vec![0.0; n_keys];
    for h in 0..heads {
        let q = &query[h * dh..(h + 1) * dh];
        for (j, w) in weights.iter_mut().enumerate() {
            let k = &packed[j * stride + d + h * dh..j * stride + d + (h + 1) * dh];
            *w = dot(q, k) * scale;
        }
        softmax_in_place(&mut weights);
        let o = &mut out[h * dh..(h + 1) * dh];
        o.fill(0.0);
        for (j, &w) in weights.iter().enumerate() {
            let v = &packed[j * stride + 2 * d + h * dh..j * stride + 2 * d + (h + 1) * dh];
            o.iter_mut().zip(v).for_each(|(o, v)| *o += w * v);
        }
        if let Some(p) = probs.as_deref_mut() {
            p[h * n_keys..(h + 1) * n_keys].copy_from_slice(&weights);
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
