// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::tensor;
use crate::vit::{ActivationTrace, Site, TokenRole};
use crate::{Error, Result};

/// Per-layer maxima averaged over an image set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormProfile {
    /// Max patch norm after each attention sub-block.
    pub post_attention: Vec<f32>,
    /// Max patch norm after each MLP sub-block.
    pub post_mlp: Vec<f32>,
    /// Max attention weight from CLS to any patch, over heads.
    pub cls_attention: Vec<f32>,
    pub images: usize,
    pub include_cls: bool,
}

impl NormProfile {
    pub fn n_layers(&self) -> usize {
        self.post_mlp.len()
    }
}

fn max_norm(trace: &ActivationTrace, layer: usize, site: Site, include_cls: bool) -> Result<f64> {
    let norms = tensor::row_norms(trace.get(layer, site)?)?;
    Ok(trace
        .roles
        .iter()
        .zip(norms.data())
        .filter(|(r, _)| match r {
            TokenRole::Patch { .. } => true,
            TokenRole::Cls => include_cls,
            TokenRole::TestTimeRegister(_) => false,
        })
        .map(|(_, &n)| n as f64)
        .fold(0.0, f64::max))
}

fn max_cls_attention(trace: &ActivationTrace, layer: usize) -> Result<f64> {
    let Some(cls) = trace.cls_index() else {
        return Ok(0.0);
    };
    let w = trace.get(layer, Site::AttentionWeights)?;
    let (heads, t, cols) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let patches = trace.patch_indices();
    let mut best = 0f64;
    for h in 0..heads {
        let row = &w.data()[(h * t + cls) * cols..(h * t + cls + 1) * cols];
        for &p in &patches {
            best = best.max(row[p] as f64);
        }
    }
    Ok(best)
}

/// Averages per-image layer maxima over `traces`. Every trace needs both
/// residual sites and attention weights at every layer.
pub fn norm_profile(traces: &[ActivationTrace], include_cls: bool) -> Result<NormProfile> {
    let first = traces.first().ok_or(Error::EmptyInput("image set"))?;
    let n_layers = first.layers_for(Site::PostMlpResidual).len();
    let mut acc = vec![[0f64; 3]; n_layers];
    for trace in traces {
        for (l, a) in acc.iter_mut().enumerate() {
            a[0] += max_norm(trace, l, Site::PostAttentionResidual, include_cls)?;
            a[1] += max_norm(trace, l, Site::PostMlpResidual, include_cls)?;
            a[2] += max_cls_attention(trace, l)?;
        }
    }
    let m = traces.len() as f64;
    let col = |k: usize| acc.iter().map(|a| (a[k] / m) as f32).collect();
    Ok(NormProfile {
        post_attention: col(0),
        post_mlp: col(1),
        cls_attention: col(2),
        images: traces.len(),
        include_cls,
    })
}
