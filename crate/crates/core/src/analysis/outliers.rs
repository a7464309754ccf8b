// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::tensor::{self, Tensor};
use crate::vit::{ActivationTrace, Site, TokenRole};
use crate::Result;

/// High-norm patch tokens of one image at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierSet {
    #[serde(default)]
    pub image_id: String,
    /// Token indices of patch tokens, by descending norm (ties: lower index first).
    pub positions: Vec<usize>,
    /// Norm of each entry of `positions`.
    pub norms: Vec<f32>,
    pub threshold: f32,
    pub measured_at_layer: usize,
}

impl OutlierSet {
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    /// Highest-norm position, if any.
    pub fn top(&self) -> Option<usize> {
        self.positions.first().copied()
    }

    pub fn with_image_id(mut self, id: impl Into<String>) -> Self {
        self.image_id = id.into();
        self
    }
}

/// Patch positions whose post-MLP residual norm at `layer` is `>= threshold`.
pub fn find_outliers(trace: &ActivationTrace, layer: usize, threshold: f32) -> Result<OutlierSet> {
    let residual = trace.get(layer, Site::PostMlpResidual)?;
    find_outliers_in(residual, &trace.roles, layer, threshold)
}

/// Same as [`find_outliers`] on an explicit residual tensor.
pub fn find_outliers_in(
    residual: &Tensor,
    roles: &[TokenRole],
    layer: usize,
    threshold: f32,
) -> Result<OutlierSet> {
    let norms = tensor::row_norms(residual)?;
    let mut hits: Vec<(usize, f32)> = roles
        .iter()
        .enumerate()
        .filter(|(_, r)| matches!(r, TokenRole::Patch { .. }))
        .map(|(i, _)| (i, norms.data()[i]))
        .filter(|&(_, n)| n >= threshold)
        .collect();
    hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(OutlierSet {
        image_id: String::new(),
        positions: hits.iter().map(|h| h.0).collect(),
        norms: hits.iter().map(|h| h.1).collect(),
        threshold,
        measured_at_layer: layer,
    })
}

/// L2 norms of the patch tokens at `(layer, site)`, in token order.
pub fn patch_norms(trace: &ActivationTrace, layer: usize, site: Site) -> Result<Vec<(usize, f32)>> {
    let norms = tensor::row_norms(trace.get(layer, site)?)?;
    Ok(trace
        .patch_indices()
        .into_iter()
        .map(|i| (i, norms.data()[i]))
        .collect())
}

/// Largest patch norm and the token holding it (ties: lower index).
pub fn max_patch_norm(trace: &ActivationTrace, layer: usize, site: Site) -> Result<(usize, f32)> {
    let norms = patch_norms(trace, layer, site)?;
    Ok(norms
        .into_iter()
        .fold((usize::MAX, f32::NEG_INFINITY), |best, cur| {
            if cur.1 > best.1 {
                cur
            } else {
                best
            }
        }))
}
