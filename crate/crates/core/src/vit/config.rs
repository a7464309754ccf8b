// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// MLP nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    /// Tanh-approximated GELU.
    Gelu,
    /// `x · sigmoid(1.702 x)`, as in the original CLIP towers.
    QuickGelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositionalEmbedding {
    #[default]
    LearnedPerPosition,
}

fn yes() -> bool {
    true
}

/// Architecture of a pre-norm ViT image encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Neurons per MLP layer.
    pub mlp_hidden: usize,
    pub nonlinearity: Nonlinearity,
    pub norm_eps: f32,
    pub has_cls: bool,
    #[serde(default)]
    pub positional_embedding: PositionalEmbedding,
    pub preprocess_mean: [f32; 3],
    pub preprocess_std: [f32; 3],
    pub final_norm: bool,
    /// Patch projection carries a bias (CLIP's does not).
    #[serde(default = "yes")]
    pub patch_bias: bool,
    /// Layer norm applied to the embedded sequence before the first block.
    #[serde(default)]
    pub embed_norm: bool,
    /// Per-channel residual scales on both branches (DINOv2).
    #[serde(default)]
    pub layer_scale: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return bad(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.mlp_hidden == 0 || self.embed_dim == 0 {
            return bad("n_layers, mlp_hidden and embed_dim must be positive".into());
        }
        if self.norm_eps <= 0.0 {
            return bad("norm_eps must be positive".into());
        }
        if self.preprocess_std.iter().any(|&s| s <= 0.0) {
            return bad("preprocess_std must be positive".into());
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    /// Tokens produced by embedding, before any appended registers.
    pub fn base_tokens(&self) -> usize {
        self.n_patches() + usize::from(self.has_cls)
    }

    /// Total tokens with `n_registers` appended.
    pub fn token_count(&self, n_registers: usize) -> usize {
        self.base_tokens() + n_registers
    }

    /// OpenCLIP ViT-B/16 image tower.
    pub fn openclip_vit_b16() -> Self {
        Self {
            name: "openclip-vit-b16".into(),
            image_size: 224,
            patch_size: 16,
            embed_dim: 768,
            n_layers: 12,
            n_heads: 12,
            mlp_hidden: 3072,
            nonlinearity: Nonlinearity::Gelu,
            norm_eps: 1e-5,
            has_cls: true,
            positional_embedding: PositionalEmbedding::LearnedPerPosition,
            preprocess_mean: [0.481_454_66, 0.457_827_5, 0.408_210_73],
            preprocess_std: [0.268_629_54, 0.261_302_58, 0.275_777_1],
            final_norm: true,
            patch_bias: false,
            embed_norm: true,
            layer_scale: false,
        }
    }

    /// DINOv2 ViT-L/14 at 224 px.
    pub fn dinov2_vit_l14() -> Self {
        Self {
            name: "dinov2-vit-l14".into(),
            image_size: 224,
            patch_size: 14,
            embed_dim: 1024,
            n_layers: 24,
            n_heads: 16,
            mlp_hidden: 4096,
            nonlinearity: Nonlinearity::Gelu,
            norm_eps: 1e-6,
            has_cls: true,
            positional_embedding: PositionalEmbedding::LearnedPerPosition,
            preprocess_mean: [0.485, 0.456, 0.406],
            preprocess_std: [0.229, 0.224, 0.225],
            final_norm: true,
            patch_bias: true,
            embed_norm: false,
            layer_scale: true,
        }
    }
}

/// Per-family analysis defaults for the register-neuron pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyDefaults {
    pub outlier_threshold: f32,
    /// Layer whose post-MLP residual is measured for outliers.
    pub outlier_measure_layer: usize,
    pub top_layer: usize,
    pub top_k: usize,
}

impl FamilyDefaults {
    /// OpenCLIP ViT-B/16: outliers ignite at the layer-6 MLP, scan layers 0..=5.
    pub fn openclip_vit_b16() -> Self {
        Self {
            outlier_threshold: 75.0,
            outlier_measure_layer: 6,
            top_layer: 5,
            top_k: 10,
        }
    }

    /// DINOv2 ViT-L/14: measured on the second-to-last layer's output.
    pub fn dinov2_vit_l14() -> Self {
        Self {
            outlier_threshold: 150.0,
            outlier_measure_layer: 22,
            top_layer: 17,
            top_k: 45,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for c in [ModelConfig::openclip_vit_b16(), ModelConfig::dinov2_vit_l14()] {
            c.validate().unwrap();
        }
        let c = ModelConfig::openclip_vit_b16();
        assert_eq!(c.token_count(0), 197);
        assert_eq!(c.token_count(1), 198);
        assert_eq!(ModelConfig::dinov2_vit_l14().grid(), 16);
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut c = ModelConfig::openclip_vit_b16();
        c.image_size = 225;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::openclip_vit_b16();
        c.n_heads = 7;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_defaults() {
        let mut v = serde_json::to_value(ModelConfig::dinov2_vit_l14()).unwrap();
        let obj = v.as_object_mut().unwrap();
        obj.remove("patch_bias");
        obj.remove("embed_norm");
        obj.remove("positional_embedding");
        let c: ModelConfig = serde_json::from_value(v).unwrap();
        assert!(c.patch_bias);
        assert!(!c.embed_norm);
    }
}
