// SPDX-License-Identifier: MIT OR Apache-2.0

//! Multi-head self-attention with an optional per-head key/value bias column.
//!
//! With a bias `(k′, v′)` installed, each head attends over `T + 1` columns:
//! the `T` real keys plus `k′`, and mixes `[V; v′ᵀ]` with the resulting
//! weights. A token whose per-head key and value equal `(k′, v′)` has exactly
//! this effect on every other token, which is what lets a bias stand in for an
//! appended register.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::weights::LayerWeights;
use crate::tensor::{self, Tensor, TensorError};
use crate::Result;

/// Key/value pair appended to one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadBias {
    pub key: Vec<f32>,
    pub value: Vec<f32>,
}

/// Per-layer, per-head attention biases.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionBias {
    /// Layer → one entry per head.
    pub layers: BTreeMap<usize, Vec<HeadBias>>,
    /// Images averaged to produce the biases.
    pub calibration_size: usize,
}

impl AttentionBias {
    pub fn layer(&self, layer: usize) -> Option<&[HeadBias]> {
        self.layers.get(&layer).map(Vec::as_slice)
    }
}

/// Everything one attention call produces.
#[derive(Debug, Clone)]
pub struct AttentionParts {
    /// After the output projection, `[T × d]`.
    pub output: Tensor,
    /// Heads concatenated before the output projection, `[T × d]`.
    pub mixed: Tensor,
    /// `[heads × T × C]`, `C = T` or `T + 1` with a bias.
    pub weights: Tensor,
    /// `[heads × T × d_head]`.
    pub keys: Tensor,
    /// `[heads × T × d_head]`.
    pub values: Tensor,
}

/// Splits `[T × 3d]` projections into `[heads × T × d_head]` q, k, v.
fn split_heads(qkv: &Tensor, n_heads: usize) -> [Vec<f32>; 3] {
    let t = qkv.rows();
    let d = qkv.cols() / 3;
    let dh = d / n_heads;
    let mut out = [vec![0f32; t * d], vec![0f32; t * d], vec![0f32; t * d]];
    for (part, buf) in out.iter_mut().enumerate() {
        for h in 0..n_heads {
            for i in 0..t {
                let src = &qkv.row(i)[part * d + h * dh..part * d + (h + 1) * dh];
                buf[(h * t + i) * dh..(h * t + i + 1) * dh].copy_from_slice(src);
            }
        }
    }
    out
}

/// Per-head `(keys, values)` of arbitrary normalized token rows.
pub fn project_keys_values(
    x_norm: &Tensor,
    layer: &LayerWeights,
    n_heads: usize,
) -> Result<(Tensor, Tensor)> {
    let qkv = linear(x_norm, &layer.qkv_weight, &layer.qkv_bias)?;
    let t = x_norm.rows();
    let dh = x_norm.cols() / n_heads;
    let [_, k, v] = split_heads(&qkv, n_heads);
    Ok((
        Tensor::new(vec![n_heads, t, dh], k)?,
        Tensor::new(vec![n_heads, t, dh], v)?,
    ))
}

/// `x · Wᵀ + b`.
pub(crate) fn linear(x: &Tensor, w: &Tensor, b: &[f32]) -> Result<Tensor> {
    let mut y = tensor::matmul_transb(x, w)?;
    let n = y.cols();
    for r in y.data_mut().chunks_mut(n) {
        for (v, bb) in r.iter_mut().zip(b) {
            *v += bb;
        }
    }
    y.check_finite("linear")?;
    Ok(y)
}

/// Attention over normalized tokens, optionally with one bias column per head.
pub fn attention_with_bias(
    x_norm: &Tensor,
    layer: &LayerWeights,
    n_heads: usize,
    bias: Option<&[HeadBias]>,
) -> Result<AttentionParts> {
    let (t, d) = x_norm.dims2("attention")?;
    let dh = d / n_heads;
    if let Some(b) = bias {
        if b.len() != n_heads || b.iter().any(|h| h.key.len() != dh || h.value.len() != dh) {
            return Err(TensorError::Dimension {
                op: "attention_with_bias",
                detail: format!(
                    "bias has {} heads, need {n_heads} pairs of length {dh}",
                    b.len()
                ),
            }
            .into());
        }
    }
    let qkv = linear(x_norm, &layer.qkv_weight, &layer.qkv_bias)?;
    let [q, k, v] = split_heads(&qkv, n_heads);
    let cols = t + usize::from(bias.is_some());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut weights = vec![0f32; n_heads * t * cols];
    let mut mixed = vec![0f32; t * d];
    for h in 0..n_heads {
        let span = |i: usize| (h * t + i) * dh..(h * t + i + 1) * dh;
        let hb = bias.map(|b| &b[h]);
        for i in 0..t {
            let qi = &q[span(i)];
            let row = &mut weights[(h * t + i) * cols..(h * t + i + 1) * cols];
            for (j, w) in row.iter_mut().enumerate().take(t) {
                let kj = &k[span(j)];
                let s: f64 = qi.iter().zip(kj).map(|(&a, &b)| a as f64 * b as f64).sum();
                *w = (s * scale) as f32;
            }
            if let Some(hb) = hb {
                let s: f64 = qi
                    .iter()
                    .zip(&hb.key)
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
                row[t] = (s * scale) as f32;
            }
            tensor::ops::softmax_slice(row);
            let mut acc = vec![0f64; dh];
            for (j, &p) in row.iter().enumerate().take(t) {
                let vj = &v[span(j)];
                for (a, &x) in acc.iter_mut().zip(vj) {
                    *a += p as f64 * x as f64;
                }
            }
            if let Some(hb) = hb {
                let p = row[t] as f64;
                for (a, &x) in acc.iter_mut().zip(&hb.value) {
                    *a += p * x as f64;
                }
            }
            for (o, a) in mixed[i * d + h * dh..i * d + (h + 1) * dh]
                .iter_mut()
                .zip(acc)
            {
                *o = a as f32;
            }
        }
    }
    let weights = Tensor::new(vec![n_heads, t, cols], weights)?;
    weights.check_finite("attention_softmax")?;
    let mixed = Tensor::new(vec![t, d], mixed)?;
    mixed.check_finite("attention_mix")?;
    let output = linear(&mixed, &layer.proj_weight, &layer.proj_bias)?;
    Ok(AttentionParts {
        output,
        mixed,
        weights,
        keys: Tensor::new(vec![n_heads, t, dh], k)?,
        values: Tensor::new(vec![n_heads, t, dh], v)?,
    })
}
