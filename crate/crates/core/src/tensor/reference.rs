// SPDX-License-Identifier: MIT OR Apache-2.0

//! Naive reference kernels. Slow, obvious, and kept in sync with [`super::ops`]
//! only through the parity tests.

use super::{Tensor, TensorError, TensorResult};

/// Triple-loop matmul with `f64` accumulation.
pub fn matmul(a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
    let (m, k) = a.dims2("reference::matmul")?;
    let (k2, n) = b.dims2("reference::matmul")?;
    if k != k2 {
        return Err(TensorError::Dimension {
            op: "reference::matmul",
            detail: format!("[{m}×{k}] · [{k2}×{n}]"),
        });
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0f64;
            for p in 0..k {
                s += a.at(i, p) as f64 * b.at(p, j) as f64;
            }
            out.push(s as f32);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Softmax over the last axis via `exp(x) / Σ exp(x)` with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = x.row(i);
        let mut max = f64::NEG_INFINITY;
        for &v in row {
            max = max.max(v as f64);
        }
        let mut sum = 0f64;
        for &v in row {
            sum += (v as f64 - max).exp();
        }
        for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
            *o = ((v as f64 - max).exp() / sum) as f32;
        }
    }
    out
}

/// Two-pass layer normalization.
pub fn layernorm(x: &Tensor, gain: &[f32], bias: &[f32], eps: f32) -> Tensor {
    let d = x.cols();
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = x.row(i);
        let mut mean = 0f64;
        for &v in row {
            mean += v as f64;
        }
        mean /= d as f64;
        let mut var = 0f64;
        for &v in row {
            var += (v as f64 - mean).powi(2);
        }
        var /= d as f64;
        let denom = (var + eps as f64).sqrt();
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = (((row[j] as f64 - mean) / denom) as f32) * gain[j] + bias[j];
        }
    }
    out
}

/// Per-element L2 row norms.
pub fn row_norms(x: &Tensor) -> Vec<f32> {
    (0..x.rows())
        .map(|i| {
            let mut s = 0f64;
            for &v in x.row(i) {
                s += (v as f64) * (v as f64);
            }
            s.sqrt() as f32
        })
        .collect()
}
