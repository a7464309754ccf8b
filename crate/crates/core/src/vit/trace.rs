// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::tokens::TokenRole;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Where in a block an activation is recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// Residual stream after `x += Attn(LN(x))`, `[T × d]`.
    PostAttentionResidual,
    /// Residual stream after `x += MLP(LN(x))`, `[T × d]`.
    PostMlpResidual,
    /// MLP hidden units after the nonlinearity and after edits, `[T × N]`.
    MlpHiddenActivation,
    /// Softmax weights, `[heads × T × T]` (one extra column when an attention
    /// bias is installed at the layer).
    AttentionWeights,
    /// Per-head keys, `[heads × T × d_head]`.
    AttentionKeys,
    /// Per-head values, `[heads × T × d_head]`.
    AttentionValues,
}

impl Site {
    pub const ALL: [Site; 6] = [
        Site::PostAttentionResidual,
        Site::PostMlpResidual,
        Site::MlpHiddenActivation,
        Site::AttentionWeights,
        Site::AttentionKeys,
        Site::AttentionValues,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Site::PostAttentionResidual => "post_attention_residual",
            Site::PostMlpResidual => "post_mlp_residual",
            Site::MlpHiddenActivation => "mlp_hidden_activation",
            Site::AttentionWeights => "attention_weights",
            Site::AttentionKeys => "attention_keys",
            Site::AttentionValues => "attention_values",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The set of `(layer, site)` pairs to record.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapSpec {
    taps: BTreeSet<(usize, Site)>,
    /// Also keep each edited neuron's column as it was before the edit.
    #[serde(default)]
    pub record_pre_edit: bool,
}

impl TapSpec {
    pub fn none() -> Self {
        Self::default()
    }

    /// Every site at every layer.
    pub fn all(n_layers: usize) -> Self {
        Self::sites(n_layers, &Site::ALL)
    }

    /// The given sites at every layer.
    pub fn sites(n_layers: usize, sites: &[Site]) -> Self {
        let mut t = Self::default();
        for l in 0..n_layers {
            for &s in sites {
                t.taps.insert((l, s));
            }
        }
        t
    }

    pub fn with(mut self, layer: usize, site: Site) -> Self {
        self.taps.insert((layer, site));
        self
    }

    pub fn insert(&mut self, layer: usize, site: Site) {
        self.taps.insert((layer, site));
    }

    pub fn contains(&self, layer: usize, site: Site) -> bool {
        self.taps.contains(&(layer, site))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, Site)> + '_ {
        self.taps.iter().copied()
    }
}

/// Activations recorded during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub entries: BTreeMap<(usize, Site), Tensor>,
    pub roles: Vec<TokenRole>,
    /// Patches per side.
    pub grid: usize,
    /// Residual stream after the last block, before any final norm.
    pub pre_final_norm: Tensor,
    /// `(layer, neuron)` → column before edits, when requested.
    pub pre_edit: BTreeMap<(usize, usize), Vec<f32>>,
}

impl ActivationTrace {
    pub fn get(&self, layer: usize, site: Site) -> Result<&Tensor> {
        self.entries
            .get(&(layer, site))
            .ok_or(Error::MissingTap { layer, site })
    }

    /// Number of distinct layers recorded for `site`.
    pub fn layers_for(&self, site: Site) -> Vec<usize> {
        self.entries
            .keys()
            .filter(|(_, s)| *s == site)
            .map(|(l, _)| *l)
            .collect()
    }

    pub fn patch_indices(&self) -> Vec<usize> {
        super::tokens::patch_indices(&self.roles)
    }

    pub fn register_indices(&self) -> Vec<usize> {
        super::tokens::register_indices(&self.roles)
    }

    pub fn cls_index(&self) -> Option<usize> {
        self.roles.iter().position(|r| *r == TokenRole::Cls)
    }
}
