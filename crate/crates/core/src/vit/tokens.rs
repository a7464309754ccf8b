// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::weights::VitWeights;
use crate::tensor::{self, Tensor};
use crate::{Error, Result};

/// What a position in the sequence stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    Cls,
    Patch { row: usize, col: usize },
    /// Appended at inference; `k` counts from 0.
    TestTimeRegister(usize),
}

/// Token embeddings plus the role of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub roles: Vec<TokenRole>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn cls_index(&self) -> Option<usize> {
        self.roles.iter().position(|r| *r == TokenRole::Cls)
    }

    pub fn patch_indices(&self) -> Vec<usize> {
        patch_indices(&self.roles)
    }

    pub fn register_indices(&self) -> Vec<usize> {
        register_indices(&self.roles)
    }
}

pub fn patch_indices(roles: &[TokenRole]) -> Vec<usize> {
    roles
        .iter()
        .enumerate()
        .filter(|(_, r)| matches!(r, TokenRole::Patch { .. }))
        .map(|(i, _)| i)
        .collect()
}

pub fn register_indices(roles: &[TokenRole]) -> Vec<usize> {
    roles
        .iter()
        .enumerate()
        .filter(|(_, r)| matches!(r, TokenRole::TestTimeRegister(_)))
        .map(|(i, _)| i)
        .collect()
}

/// Token index of patch `(row, col)` in an embedded sequence.
pub fn patch_token(config: &ModelConfig, row: usize, col: usize) -> usize {
    usize::from(config.has_cls) + row * config.grid() + col
}

/// Roles of a freshly embedded sequence.
pub fn base_roles(config: &ModelConfig) -> Vec<TokenRole> {
    let g = config.grid();
    let mut roles = Vec::with_capacity(config.base_tokens());
    if config.has_cls {
        roles.push(TokenRole::Cls);
    }
    for row in 0..g {
        for col in 0..g {
            roles.push(TokenRole::Patch { row, col });
        }
    }
    roles
}

/// Flattens patch `(row, col)` of a `[3 × S × S]` pixel tensor channel-major.
pub fn patch_vector(pixels: &Tensor, patch: usize, row: usize, col: usize) -> Vec<f32> {
    let s = pixels.shape()[2];
    let d = pixels.data();
    let mut v = Vec::with_capacity(3 * patch * patch);
    for c in 0..3 {
        for py in 0..patch {
            let y = row * patch + py;
            let base = c * s * s + y * s + col * patch;
            v.extend_from_slice(&d[base..base + patch]);
        }
    }
    v
}

/// Patchify, project, add positions, prepend CLS.
///
/// `pixels` is a normalized `[3 × image_size × image_size]` tensor.
pub fn embed_image(
    pixels: &Tensor,
    config: &ModelConfig,
    weights: &VitWeights,
) -> Result<TokenSequence> {
    let s = config.image_size;
    if pixels.shape() != [3, s, s] {
        return Err(tensor::TensorError::Dimension {
            op: "embed_image",
            detail: format!("expected pixels [3, {s}, {s}], got {:?}", pixels.shape()),
        }
        .into());
    }
    let g = config.grid();
    let p = config.patch_size;
    let mut patches = Vec::with_capacity(g * g * 3 * p * p);
    for row in 0..g {
        for col in 0..g {
            patches.extend(patch_vector(pixels, p, row, col));
        }
    }
    let patches = Tensor::new(vec![g * g, 3 * p * p], patches)?;
    let projected = tensor::matmul_transb(&patches, &weights.patch_weight)?;

    let d = config.embed_dim;
    let t0 = config.base_tokens();
    let mut data = Vec::with_capacity(t0 * d);
    if let Some(cls) = &weights.cls_token {
        data.extend(cls.iter().zip(weights.pos_embed.row(0)).map(|(a, b)| a + b));
    }
    let off = usize::from(config.has_cls);
    for i in 0..g * g {
        let pos = weights.pos_embed.row(off + i);
        data.extend(
            projected
                .row(i)
                .iter()
                .zip(&weights.patch_bias)
                .zip(pos)
                .map(|((x, b), q)| x + b + q),
        );
    }
    let mut tokens = Tensor::new(vec![t0, d], data)?;
    tokens.check_finite("embed_image")?;
    if let Some(n) = &weights.pre_norm {
        tokens = tensor::layernorm(&tokens, &n.gain, &n.bias, config.norm_eps)?;
    }
    Ok(TokenSequence {
        tokens,
        roles: base_roles(config),
    })
}

/// How appended register tokens start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegisterInit {
    /// All-zero vector.
    #[default]
    Zeros,
    /// Per-dimension normal draw matching the mean/std of this image's patch tokens.
    GaussianMatched { seed: u64 },
    /// Mean of this image's patch tokens.
    PatchMean,
}

/// Appends `count` test-time register tokens after the existing sequence.
///
/// Registers get no positional embedding.
pub fn append_registers(
    seq: &TokenSequence,
    count: usize,
    init: RegisterInit,
) -> Result<TokenSequence> {
    if count == 0 {
        return Ok(seq.clone());
    }
    let d = seq.tokens.cols();
    let patches = seq.patch_indices();
    let existing = seq.register_indices().len();
    let stats = || -> Result<(Vec<f64>, Vec<f64>)> {
        if patches.is_empty() {
            return Err(Error::EmptyInput("patch tokens for register init"));
        }
        let n = patches.len() as f64;
        let mut mean = vec![0f64; d];
        for &i in &patches {
            for (m, &v) in mean.iter_mut().zip(seq.tokens.row(i)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0f64; d];
        for &i in &patches {
            for ((s, &v), m) in var.iter_mut().zip(seq.tokens.row(i)).zip(&mean) {
                *s += (v as f64 - m).powi(2);
            }
        }
        Ok((mean, var.into_iter().map(|v| (v / n).sqrt()).collect()))
    };
    let mut extra = Vec::with_capacity(count * d);
    match init {
        RegisterInit::Zeros => extra.resize(count * d, 0.0),
        RegisterInit::PatchMean => {
            let (mean, _) = stats()?;
            for _ in 0..count {
                extra.extend(mean.iter().map(|&m| m as f32));
            }
        }
        RegisterInit::GaussianMatched { seed } => {
            let (mean, std) = stats()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..count {
                for (m, s) in mean.iter().zip(&std) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    extra.push((m + s * z) as f32);
                }
            }
        }
    }
    let mut data = seq.tokens.data().to_vec();
    data.extend(extra);
    let mut roles = seq.roles.clone();
    roles.extend((0..count).map(|k| TokenRole::TestTimeRegister(existing + k)));
    Ok(TokenSequence {
        tokens: Tensor::new(vec![roles.len(), d], data)?,
        roles,
    })
}
