//! Scalar f64 kernels shared by the public tensor ops and the model engine.
//!
//! Every reduction accumulates in f64 so that results are independent of
//! how callers batch or shard their data.

use std::cell::Cell;

thread_local! {
    /// Multiply-accumulate counter for instrumented forward passes.
    /// Thread-local: each thread meters only its own kernel calls.
    static MAC_COUNT: Cell<u64> = const { Cell::new(0) };
}

pub fn mac_reset() {
    MAC_COUNT.with(|c| c.set(0));
}

pub fn mac_count() -> u64 {
    MAC_COUNT.with(|c| c.get())
}

fn mac_add(n: u64) {
    MAC_COUNT.with(|c| c.set(c.get() + n));
}

/// c[m x n] = a[m x k] * b[k x n], all row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0f64; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (t, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[t * n..(t + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    mac_add((m * k * n) as u64);
    c
}

/// c[m x n] = a[m x k] * b[n x k]^T. Both operands are traversed row-wise,
/// which is the layout weights are stored in ([out x in]).
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0f64; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *cv = acc;
        }
    }
    mac_add((m * k * n) as u64);
    c
}

/// acc[rows x cols] += a_col[rows] outer b_row[cols].
pub fn add_outer(acc: &mut [f64], a_col: &[f64], b_row: &[f64]) {
    debug_assert_eq!(acc.len(), a_col.len() * b_row.len());
    let cols = b_row.len();
    for (i, &av) in a_col.iter().enumerate() {
        if av == 0.0 {
            continue;
        }
        let row = &mut acc[i * cols..(i + 1) * cols];
        for (rv, &bv) in row.iter_mut().zip(b_row) {
            *rv += av * bv;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place numerically stabilized softmax of one row.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF via the exact erf form.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(x * FRAC_1_SQRT_2))
}

pub fn gelu(x: f64) -> f64 {
    x * norm_cdf(x)
}

/// d/dx gelu(x) = Phi(x) + x * phi(x).
pub fn gelu_prime(x: f64) -> f64 {
    norm_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Normalizes `x` over its last axis and applies the affine transform.
/// Returns (output, xhat, inv_std) with the latter two needed by backward.
pub fn layernorm_row(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv_std = 1.0 / (var + eps).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let out: Vec<f64> = xhat
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&xh, (&g, &b))| g * xh + b)
        .collect();
    (out, xhat, inv_std)
}

/// Layer normalization whose mean/variance statistics run over the
/// mask-true entries only (the normalized value is still produced for
/// every entry). Diagnostic variant used to verify dead-channel removal.
pub fn layernorm_row_masked(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    mask: &[bool],
) -> (Vec<f64>, Vec<f64>, f64) {
    let n = mask.iter().filter(|&&m| m).count().max(1) as f64;
    let mean = x
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .sum::<f64>()
        / n;
    let var = x
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| (v - mean) * (v - mean))
        .sum::<f64>()
        / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let out: Vec<f64> = xhat
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&xh, (&g, &b))| g * xh + b)
        .collect();
    (out, xhat, inv_std)
}

/// Gradient of layernorm_row with respect to its input.
pub fn layernorm_row_backward(dy: &[f64], xhat: &[f64], inv_std: f64, gamma: &[f64]) -> Vec<f64> {
    let d = dy.len() as f64;
    let dxhat: Vec<f64> = dy.iter().zip(gamma).map(|(&g1, &g2)| g1 * g2).collect();
    let mean_dxhat = dxhat.iter().sum::<f64>() / d;
    let mean_dxhat_xhat = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / d;
    dxhat
        .iter()
        .zip(xhat)
        .map(|(&dxh, &xh)| inv_std * (dxh - mean_dxhat - xh * mean_dxhat_xhat))
        .collect()
}
