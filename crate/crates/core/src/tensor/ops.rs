// SPDX-License-Identifier: MIT OR Apache-2.0

//! Runtime kernels.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use super::{Tensor, TensorError, TensorResult};

/// Below this many multiply-adds a matmul stays on the calling thread.
#[cfg(feature = "parallel")]
const PARALLEL_WORK: usize = 1 << 18;

fn finish(op: &'static str, shape: Vec<usize>, data: Vec<f32>) -> TensorResult<Tensor> {
    let t = Tensor::new(shape, data)?;
    t.check_finite(op)?;
    Ok(t)
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(TensorError::Dimension {
            op: "matmul",
            detail: format!("inner dimensions differ: [{m}×{k}] · [{k2}×{n}]"),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    // i-p-j order with an f64 row accumulator; summation order over p matches
    // the reference triple loop.
    let row = |i: usize, out: &mut [f32]| {
        let mut acc = vec![0f64; n];
        for p in 0..k {
            let aip = ad[i * k + p] as f64;
            let brow = &bd[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += aip * bv as f64;
            }
        }
        for (o, s) in out.iter_mut().zip(acc) {
            *o = s as f32;
        }
    };
    let mut out = vec![0f32; m * n];
    #[cfg(feature = "parallel")]
    if m * n * k >= PARALLEL_WORK {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, o)| row(i, o));
        return finish("matmul", vec![m, n], out);
    }
    for (i, o) in out.chunks_mut(n).enumerate() {
        row(i, o);
    }
    finish("matmul", vec![m, n], out)
}

/// `a[m×k] · b[n×k]ᵀ`, the layout of a linear layer's weight.
pub fn matmul_transb(a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
    let (m, k) = a.dims2("matmul_transb")?;
    let (n, k2) = b.dims2("matmul_transb")?;
    if k != k2 {
        return Err(TensorError::Dimension {
            op: "matmul_transb",
            detail: format!("inner dimensions differ: [{m}×{k}] · [{n}×{k2}]ᵀ"),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let row = |i: usize, out: &mut [f32]| {
        let arow = &ad[i * k..(i + 1) * k];
        for (j, o) in out.iter_mut().enumerate() {
            let brow = &bd[j * k..(j + 1) * k];
            let s: f64 = arow
                .iter()
                .zip(brow)
                .map(|(&x, &y)| x as f64 * y as f64)
                .sum();
            *o = s as f32;
        }
    };
    let mut out = vec![0f32; m * n];
    #[cfg(feature = "parallel")]
    if m * n * k >= PARALLEL_WORK {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, o)| row(i, o));
        return finish("matmul_transb", vec![m, n], out);
    }
    for (i, o) in out.chunks_mut(n).enumerate() {
        row(i, o);
    }
    finish("matmul_transb", vec![m, n], out)
}

/// Softmax along `axis`, max-subtracted.
pub fn softmax(x: &Tensor, axis: usize) -> TensorResult<Tensor> {
    let rank = x.rank();
    if axis >= rank {
        return Err(TensorError::InvalidAxis { axis, rank });
    }
    let len = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let src = x.data();
    let mut out = vec![0f32; src.len()];
    let mut buf = vec![0f64; len];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| src[at(j)]).fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut sum = 0f64;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = (src[at(j)] as f64 - max).exp();
                sum += *b;
            }
            for (j, b) in buf.iter().enumerate() {
                out[at(j)] = (b / sum) as f32;
            }
        }
    }
    finish("softmax", x.shape().to_vec(), out)
}

/// In-place softmax of one slice; used on attention rows.
pub(crate) fn softmax_slice(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    for (r, e) in row.iter_mut().zip(exps.iter_mut()) {
        *r = (*e / sum) as f32;
    }
}

/// Per-row layer normalization over the last dimension.
pub fn layernorm(x: &Tensor, gain: &[f32], bias: &[f32], eps: f32) -> TensorResult<Tensor> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(TensorError::Dimension {
            op: "layernorm",
            detail: format!(
                "row width {d}, gain {} and bias {}",
                gain.len(),
                bias.len()
            ),
        });
    }
    let mut out = vec![0f32; x.numel()];
    for (src, dst) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let (mut sum, mut sumsq) = (0f64, 0f64);
        for &v in src {
            sum += v as f64;
            sumsq += v as f64 * v as f64;
        }
        let mean = sum / d as f64;
        let var = (sumsq / d as f64 - mean * mean).max(0.0);
        let inv = 1.0 / (var + eps as f64).sqrt();
        for (j, o) in dst.iter_mut().enumerate() {
            *o = (((src[j] as f64 - mean) * inv) as f32) * gain[j] + bias[j];
        }
    }
    finish("layernorm", x.shape().to_vec(), out)
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Tanh-approximated GELU of one value.
pub fn gelu_scalar(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())) as f32
}

/// `x · sigmoid(1.702 x)`.
pub fn quick_gelu_scalar(x: f32) -> f32 {
    let x = x as f64;
    (x / (1.0 + (-1.702 * x).exp())) as f32
}

fn map(x: &Tensor, op: &'static str, f: fn(f32) -> f32) -> TensorResult<Tensor> {
    finish(op, x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

pub fn gelu(x: &Tensor) -> TensorResult<Tensor> {
    map(x, "gelu", gelu_scalar)
}

pub fn quick_gelu(x: &Tensor) -> TensorResult<Tensor> {
    map(x, "quick_gelu", quick_gelu_scalar)
}

/// L2 norm of every row: `[T×d] -> [T]`.
pub fn row_norms(x: &Tensor) -> TensorResult<Tensor> {
    let d = x.cols();
    let out = x
        .data()
        .chunks(d)
        .map(|r| r.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt() as f32)
        .collect::<Vec<_>>();
    let n = out.len();
    finish("row_norms", vec![n], out)
}

/// Elementwise sum of equally shaped tensors.
pub fn add(a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
    if a.shape() != b.shape() {
        return Err(TensorError::Dimension {
            op: "add",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    finish(
        "add",
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    )
}
