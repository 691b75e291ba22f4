//! Shared numeric kernels.
//!
//! Every routine here accumulates reductions in f64 over f32 storage and is
//! row-independent: the arithmetic producing output row `i` depends only on
//! input row `i` (plus whole operand matrices), never on how rows are grouped
//! into blocks or threads. That property is what makes incremental decoding
//! reproduce one-pass forward results bit-for-bit, and what keeps row-parallel
//! execution deterministic.

use rayon::prelude::*;
use std::sync::atomic::{AtomicBool, Ordering};

/// Global switch for row-parallel kernels. Timing benchmarks disable it to
/// measure strictly single-threaded cost.
static PARALLEL: AtomicBool = AtomicBool::new(true);

pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

/// Work threshold (multiply-adds) below which threading is not worth it.
const PAR_MIN_FLOPS: usize = 1 << 19;

/// C[m,n] = A[m,k] * B[k,n], f64 accumulation.
pub fn matmul(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let work = m * k * n;
    if parallel_enabled() && work >= PAR_MIN_FLOPS && m >= 8 {
        let threads = rayon::current_num_threads().max(1);
        let chunk_rows = m.div_ceil(threads);
        c.par_chunks_mut(chunk_rows * n)
            .enumerate()
            .for_each(|(ci, cchunk)| {
                let row0 = ci * chunk_rows;
                let rows = cchunk.len() / n;
                matmul_serial(&a[row0 * k..(row0 + rows) * k], b, cchunk, rows, k, n);
            });
    } else {
        matmul_serial(a, b, c, m, k, n);
    }
}

/// Serial kernel: 4-row blocked saxpy order. Per-row accumulation runs over
/// k in ascending order regardless of blocking, so results do not depend on
/// where block or thread boundaries fall. Iterations whose A entries are all
/// exactly +0.0 are skipped: adding 0.0 * b never changes a finite
/// accumulator, so the skip is bit-neutral, and attention matrices carry
/// large all-zero masked tails.
fn matmul_serial(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    let mut acc = vec![0.0f64; 4 * n];
    let mut i = 0;
    while i + 4 <= m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        for kk in 0..k {
            if a0[kk] == 0.0 && a1[kk] == 0.0 && a2[kk] == 0.0 && a3[kk] == 0.0 {
                continue;
            }
            let v0 = a0[kk] as f64;
            let v1 = a1[kk] as f64;
            let v2 = a2[kk] as f64;
            let v3 = a3[kk] as f64;
            let brow = &b[kk * n..(kk + 1) * n];
            let (acc0, rest) = acc.split_at_mut(n);
            let (acc1, rest) = rest.split_at_mut(n);
            let (acc2, acc3) = rest.split_at_mut(n);
            for j in 0..n {
                let bv = brow[j] as f64;
                acc0[j] += v0 * bv;
                acc1[j] += v1 * bv;
                acc2[j] += v2 * bv;
                acc3[j] += v3 * bv;
            }
        }
        for r in 0..4 {
            let crow = &mut c[(i + r) * n..(i + r + 1) * n];
            for j in 0..n {
                crow[j] = acc[r * n + j] as f32;
            }
        }
        i += 4;
    }
    while i < m {
        let accr = &mut acc[..n];
        accr.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                accr[j] += av * brow[j] as f64;
            }
        }
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            crow[j] = accr[j] as f32;
        }
        i += 1;
    }
}

/// X[m,n] -> X^T[n,m].
pub fn transpose(x: &[f32], m: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(x.len(), m * n);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

/// C[m,n] = A[m,k] * B[n,k]^T (B stored row-major as n rows of k).
pub fn matmul_bt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    matmul(a, &bt, c, m, k, n);
}

/// Row-limited A * B^T: row i is computed only against the first `limits[i]`
/// rows of B; the remaining columns are written as exact 0.0. Each computed
/// element carries the identical arithmetic as the unlimited kernel, so
/// masked and dense routes agree bitwise on the computed region.
pub fn matmul_bt_limited(
    a: &[f32],
    b: &[f32],
    c: &mut [f32],
    m: usize,
    k: usize,
    n: usize,
    limits: &[usize],
) {
    debug_assert_eq!(limits.len(), m);
    let mut start = 0usize;
    let mut scratch: Vec<f32> = Vec::new();
    while start < m {
        let lim = limits[start];
        assert!(lim >= 1 && lim <= n, "row limit {lim} out of range [1,{n}]");
        let mut end = start + 1;
        while end < m && limits[end] == lim {
            end += 1;
        }
        let rows = end - start;
        let bt = transpose(&b[..lim * k], lim, k);
        scratch.clear();
        scratch.resize(rows * lim, 0.0);
        matmul(&a[start * k..end * k], &bt, &mut scratch, rows, k, lim);
        for r in 0..rows {
            let crow = &mut c[(start + r) * n..(start + r + 1) * n];
            crow[..lim].copy_from_slice(&scratch[r * lim..(r + 1) * lim]);
            crow[lim..].fill(0.0);
        }
        start = end;
    }
}

/// C[k,n] = A[m,k]^T * B[m,n].
pub fn matmul_at_b(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    let at = transpose(a, m, k);
    matmul(&at, b, c, k, m, n);
}

/// y += x, elementwise into an f32 buffer.
pub fn accumulate(dst: &mut [f32], src: &[f32]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// GELU, tanh approximation. The backward pass differentiates this exact
/// formula, not the erf form.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * A * x * x)
}

pub fn gelu_forward(x: &[f32], out: &mut [f32]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = gelu(v as f64) as f32;
    }
}

/// Row-wise softmax over the first `limit[i]` columns; remaining columns are
/// written as exact 0.0 so downstream matmuls over the full width reproduce
/// limited-width arithmetic bit-for-bit. Exponentials are evaluated in f32
/// (the shifted arguments are non-positive, where f32 exp is well
/// conditioned); the normalizing sum accumulates in f64.
pub fn masked_softmax_forward(x: &[f32], out: &mut [f32], rows: usize, cols: usize, limits: &[usize]) {
    debug_assert_eq!(limits.len(), rows);
    let work = limits.iter().sum::<usize>();
    if parallel_enabled() && work >= (1 << 16) && rows >= 8 {
        let threads = rayon::current_num_threads().max(1);
        let chunk = rows.div_ceil(threads);
        out.par_chunks_mut(chunk * cols).enumerate().for_each(|(ci, ochunk)| {
            let row0 = ci * chunk;
            let nrows = ochunk.len() / cols;
            softmax_rows(&x[row0 * cols..], ochunk, nrows, cols, &limits[row0..row0 + nrows]);
        });
    } else {
        softmax_rows(x, out, rows, cols, limits);
    }
}

fn softmax_rows(x: &[f32], out: &mut [f32], rows: usize, cols: usize, limits: &[usize]) {
    for i in 0..rows {
        let lim = limits[i];
        assert!(lim >= 1 && lim <= cols, "softmax row limit {lim} out of range [1,{cols}]");
        let row = &x[i * cols..i * cols + lim];
        let orow = &mut out[i * cols..(i + 1) * cols];
        let mut mx = f32::NEG_INFINITY;
        for &v in row {
            mx = mx.max(v);
        }
        let mut sum = 0.0f64;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - mx).exp();
            orow[j] = e;
            sum += e as f64;
        }
        let inv = 1.0 / sum;
        for o in orow[..lim].iter_mut() {
            *o = ((*o as f64) * inv) as f32;
        }
        for o in orow[lim..].iter_mut() {
            *o = 0.0;
        }
    }
}

/// dx_j = p_j * (g_j - sum_k g_k p_k), per row, within the row limit.
pub fn masked_softmax_backward(
    probs: &[f32],
    grad_out: &[f32],
    grad_in: &mut [f32],
    rows: usize,
    cols: usize,
    limits: &[usize],
) {
    for i in 0..rows {
        let lim = limits[i];
        let p = &probs[i * cols..i * cols + lim];
        let g = &grad_out[i * cols..i * cols + lim];
        let mut dot = 0.0f64;
        for j in 0..lim {
            dot += g[j] as f64 * p[j] as f64;
        }
        let gi = &mut grad_in[i * cols..(i + 1) * cols];
        for j in 0..lim {
            gi[j] += (p[j] as f64 * (g[j] as f64 - dot)) as f32;
        }
        // columns past the limit receive no gradient
    }
}

fn lane_stats(x: &[f32], base: usize, len: usize, inner: usize, eps: f32) -> (f64, f64) {
    let mut mean = 0.0f64;
    for l in 0..len {
        mean += x[base + l * inner] as f64;
    }
    mean /= len as f64;
    let mut var = 0.0f64;
    for l in 0..len {
        let d = x[base + l * inner] as f64 - mean;
        var += d * d;
    }
    var /= len as f64;
    (mean, 1.0 / (var + eps as f64).sqrt())
}

/// Normalize lanes along `axis` to zero mean, unit variance.
pub fn layernorm_forward(x: &[f32], out: &mut [f32], shape: &[usize], axis: usize, eps: f32) {
    assert!(eps > 0.0, "layernorm eps must be positive");
    assert!(axis < shape.len(), "layernorm axis {axis} out of range for {shape:?}");
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for r in 0..inner {
            let base = o * len * inner + r;
            let (mean, inv_std) = lane_stats(x, base, len, inner, eps);
            for l in 0..len {
                out[base + l * inner] = ((x[base + l * inner] as f64 - mean) * inv_std) as f32;
            }
        }
    }
}

pub fn layernorm_backward(
    x: &[f32],
    grad_out: &[f32],
    grad_in: &mut [f32],
    shape: &[usize],
    axis: usize,
    eps: f32,
) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for r in 0..inner {
            let base = o * len * inner + r;
            let (mean, inv_std) = lane_stats(x, base, len, inner, eps);
            // dl/dx = inv_std * (g - mean(g) - xhat * mean(g*xhat))
            let mut g_mean = 0.0f64;
            let mut gx_mean = 0.0f64;
            for l in 0..len {
                let g = grad_out[base + l * inner] as f64;
                let xhat = (x[base + l * inner] as f64 - mean) * inv_std;
                g_mean += g;
                gx_mean += g * xhat;
            }
            g_mean /= len as f64;
            gx_mean /= len as f64;
            for l in 0..len {
                let g = grad_out[base + l * inner] as f64;
                let xhat = (x[base + l * inner] as f64 - mean) * inv_std;
                grad_in[base + l * inner] += (inv_std * (g - g_mean - xhat * gx_mean)) as f32;
            }
        }
    }
}

/// Mean of squared differences; the f64 value is kept for finite-difference
/// oracles that need more than f32 resolution in the loss.
pub fn mean_sq(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut sum = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        sum += d * d;
    }
    sum / a.len() as f64
}

/// Sum of all entries in f64.
pub fn sum(x: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for &v in x {
        s += v as f64;
    }
    s
}

/// Euclidean norm in f64.
pub fn l2_norm(x: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for &v in x {
        s += v as f64 * v as f64;
    }
    s.sqrt()
}
