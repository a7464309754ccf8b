// SPDX-License-Identifier: MIT OR Apache-2.0

//! Splitting an attention output into register and non-register parts.
//!
//! For token `t`, `Σᵢ pᵗᵢ vᵢ = Σ_{i∈R} pᵗᵢ vᵢ + Σ_{i∉R} pᵗᵢ vᵢ`. Both parts are
//! computed per head and concatenated, matching the pre-projection layout.

use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, TensorError};
use crate::vit::{ActivationTrace, Site};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub layer: usize,
    pub register_indices: Vec<usize>,
    /// `[T × d]`, contribution of the register tokens to each token's update.
    pub registers: Tensor,
    /// `[T × d]`, contribution of every other token.
    pub non_registers: Tensor,
}

impl DecompositionReport {
    /// `registers + non_registers`.
    pub fn total(&self) -> Tensor {
        let data = self
            .registers
            .data()
            .iter()
            .zip(self.non_registers.data())
            .map(|(a, b)| a + b)
            .collect();
        Tensor::new(self.registers.shape().to_vec(), data).expect("same shape")
    }
}

/// Partitions the layer's attention output by source token.
///
/// Needs attention weights and values tapped at `layer`, recorded without an
/// attention bias.
pub fn decompose_attention(
    trace: &ActivationTrace,
    layer: usize,
    register_indices: &[usize],
) -> Result<DecompositionReport> {
    let w = trace.get(layer, Site::AttentionWeights)?;
    let v = trace.get(layer, Site::AttentionValues)?;
    let (heads, t, cols) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if cols != t {
        return Err(TensorError::Dimension {
            op: "decompose_attention",
            detail: "attention weights include a bias column".into(),
        }
        .into());
    }
    if let Some(&bad) = register_indices.iter().find(|&&i| i >= t) {
        return Err(Error::Index {
            what: "register token",
            index: bad,
            len: t,
        });
    }
    let dh = v.shape()[2];
    let d = heads * dh;
    let mut is_reg = vec![false; t];
    for &i in register_indices {
        is_reg[i] = true;
    }
    let mut reg = vec![0f64; t * d];
    let mut rest = vec![0f64; t * d];
    for h in 0..heads {
        for q in 0..t {
            let row = &w.data()[(h * t + q) * t..(h * t + q + 1) * t];
            for (i, &p) in row.iter().enumerate() {
                let vi = &v.data()[(h * t + i) * dh..(h * t + i + 1) * dh];
                let dst = if is_reg[i] { &mut reg } else { &mut rest };
                for (o, &x) in dst[q * d + h * dh..q * d + (h + 1) * dh].iter_mut().zip(vi) {
                    *o += p as f64 * x as f64;
                }
            }
        }
    }
    let to_t = |v: Vec<f64>| Tensor::new(vec![t, d], v.into_iter().map(|x| x as f32).collect());
    Ok(DecompositionReport {
        layer,
        register_indices: register_indices.to_vec(),
        registers: to_t(reg)?,
        non_registers: to_t(rest)?,
    })
}

/// Cosine similarity; 1 when both are zero, 0 when exactly one is.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        ab += x as f64 * y as f64;
        aa += x as f64 * x as f64;
        bb += y as f64 * y as f64;
    }
    match (aa == 0.0, bb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => ab / (aa.sqrt() * bb.sqrt()),
    }
}

/// Mean row-wise cosine between two `[T × d]` tensors over `tokens`.
pub fn mean_row_cosine(a: &Tensor, b: &Tensor, tokens: &[usize]) -> f64 {
    if tokens.is_empty() {
        return 1.0;
    }
    tokens
        .iter()
        .map(|&i| cosine(a.row(i), b.row(i)))
        .sum::<f64>()
        / tokens.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_edge_cases() {
        assert_eq!(cosine(&[0.0, 0.0], &[0.0, 0.0]), 1.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((cosine(&[1.0, 1.0], &[2.0, 2.0]) - 1.0).abs() < 1e-12);
        assert!((cosine(&[1.0, 0.0], &[0.0, 3.0])).abs() < 1e-12);
    }
}
