//! Dense row-major kernels shared by the pure tensor functions and the tape.
//!
//! All loops run in a fixed order so results are bit-reproducible.

use super::Real;

/// Dot product with eight independent partial sums, combined in a fixed order.
#[inline]
pub fn dot(a: &[Real], b: &[Real]) -> Real {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0 as Real; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let ra = &a[c * 8..c * 8 + 8];
        let rb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += ra[l] * rb[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: Real, x: &[Real], y: &mut [Real]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

const MR: usize = 2;
const NR: usize = 8;

/// `out[m×n] += a[m×k] · b[k×n]`
///
/// Register-tiled over `4 × 8` output blocks; each block sums over `k` in
/// order before being added to `out`.
pub fn gemm_nn(a: &[Real], b: &[Real], out: &mut [Real], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[0.0 as Real; NR]; MR];
            let rows: [&[Real]; MR] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
            for (kk, brow) in b[j..].chunks(n).take(k).enumerate() {
                let brow: &[Real; NR] = brow[..NR].try_into().unwrap();
                for (acc_r, row) in acc.iter_mut().zip(&rows) {
                    let av = row[kk];
                    for c in 0..NR {
                        acc_r[c] += av * brow[c];
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                let o = &mut out[(i + r) * n + j..(i + r) * n + j + NR];
                for c in 0..NR {
                    o[c] += acc_r[c];
                }
            }
            j += NR;
        }
        if j < n {
            edge(a, b, out, i..i + MR, j, k, n);
        }
        i += MR;
    }
    if i < m {
        edge(a, b, out, i..m, 0, k, n);
    }
}

fn edge(a: &[Real], b: &[Real], out: &mut [Real], rows: std::ops::Range<usize>, j0: usize, k: usize, n: usize) {
    for i in rows {
        for j in j0..n {
            let mut s = 0.0;
            for kk in 0..k {
                s += a[i * k + kk] * b[kk * n + j];
            }
            out[i * n + j] += s;
        }
    }
}

fn transpose(x: &[Real], rows: usize, cols: usize) -> Vec<Real> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt(a: &[Real], b: &[Real], out: &mut [Real], m: usize, k: usize, n: usize) {
    if m == 1 {
        for j in 0..n {
            out[j] += dot(&a[..k], &b[j * k..(j + 1) * k]);
        }
        return;
    }
    gemm_nn(a, &transpose(&b[..n * k], n, k), out, m, k, n);
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn gemm_tn(a: &[Real], b: &[Real], out: &mut [Real], m: usize, k: usize, n: usize) {
    gemm_nn(&transpose(&a[..m * k], m, k), b, out, k, m, n);
}

/// Branch-stable logistic function.
#[inline]
pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: Real = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation, evaluated as `x · σ(2u)` with
/// `u = √(2/π)(x + 0.044715x³)`.
#[inline]
pub fn gelu(x: Real) -> Real {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    x * sigmoid(2.0 * u)
}

#[inline]
pub fn gelu_grad(x: Real) -> Real {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let s = sigmoid(2.0 * u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    s + 2.0 * x * s * (1.0 - s) * du
}

/// In-place softmax of `row / tau` with max subtraction.
pub fn softmax_in_place(row: &mut [Real], tau: Real) {
    let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / tau).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log Σ exp(row)` with max subtraction.
pub fn log_sum_exp(row: &[Real]) -> Real {
    let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let s: Real = row.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}
