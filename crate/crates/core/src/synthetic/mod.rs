// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tiny synthetic ViTs and independent oracles.
//!
//! [`random_model`] draws an unstructured model for kernel parity checks.
//! [`generate_planted_model`] builds one with a known register-neuron
//! mechanism, so discovery and intervention code can be checked against
//! ground truth without a real checkpoint.

mod oracle;
mod plant;
mod reference;

pub use oracle::{brute_force_register_scan, NeuronDrop};
pub use plant::{
    generate_planted_model, GroundTruth, ImageTruth, PlantSpec, PlantedImage, PlantedModel,
    Trigger,
};
pub use reference::{reference_embed, reference_forward, ReferenceOutput};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;
use crate::vit::{required_parameters, ModelConfig, Nonlinearity, PositionalEmbedding, WeightStore};

pub(crate) fn normal(rng: &mut ChaCha8Rng, std: f64) -> f32 {
    let z: f64 = StandardNormal.sample(rng);
    (z * std) as f32
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], mean: f64, std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| mean as f32 + normal(rng, std)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

/// A small random model with every optional architecture flag drawn from
/// `seed`. Weights are scaled so activations stay O(1).
pub fn random_model(seed: u64) -> (ModelConfig, WeightStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patch_size = [2, 4][rng.random_range(0..2)];
    let grid = rng.random_range(2..=4);
    let n_heads = [1, 2, 4][rng.random_range(0..3)];
    let embed_dim = n_heads * [2, 4, 6][rng.random_range(0..3)];
    let config = ModelConfig {
        name: format!("random-{seed}"),
        image_size: patch_size * grid,
        patch_size,
        embed_dim,
        n_layers: rng.random_range(1..=3),
        n_heads,
        mlp_hidden: rng.random_range(4..=24),
        nonlinearity: if rng.random_bool(0.5) {
            Nonlinearity::Gelu
        } else {
            Nonlinearity::QuickGelu
        },
        norm_eps: if rng.random_bool(0.5) { 1e-5 } else { 1e-6 },
        has_cls: rng.random_bool(0.8),
        positional_embedding: PositionalEmbedding::LearnedPerPosition,
        preprocess_mean: [0.5; 3],
        preprocess_std: [0.25; 3],
        final_norm: rng.random_bool(0.5),
        patch_bias: rng.random_bool(0.5),
        embed_norm: rng.random_bool(0.3),
        layer_scale: rng.random_bool(0.3),
    };
    let mut store = WeightStore::new();
    for (name, shape) in required_parameters(&config) {
        let t = if name.ends_with("norm1.weight")
            || name.ends_with("norm2.weight")
            || name == "norm.weight"
            || name == "pre_norm.weight"
        {
            gaussian(&mut rng, &shape, 1.0, 0.1)
        } else if name.ends_with("ls1") || name.ends_with("ls2") {
            gaussian(&mut rng, &shape, 0.5, 0.2)
        } else if name.ends_with("bias") || name == "cls_token" || name == "pos_embed" {
            gaussian(&mut rng, &shape, 0.0, 0.1)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            gaussian(&mut rng, &shape, 0.0, 1.0 / (fan_in as f64).sqrt())
        };
        store.insert(name, t);
    }
    (config, store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_models_validate_and_repeat() {
        for seed in 0..20 {
            let (c, s) = random_model(seed);
            c.validate().unwrap();
            s.validate(&c).unwrap();
            let (c2, s2) = random_model(seed);
            assert_eq!(c, c2);
            assert!(s.iter().zip(s2.iter()).all(|(a, b)| a == b));
        }
    }
}
