// SPDX-License-Identifier: MIT OR Apache-2.0

//! The ViT runtime: configuration, weights, tokens, and the instrumented
//! forward pass.

pub mod attention;
pub mod config;
pub mod edit;
pub mod model;
pub mod tokens;
pub mod trace;
pub mod weights;

pub use attention::{attention_with_bias, project_keys_values, AttentionBias, AttentionParts, HeadBias};
pub use config::{FamilyDefaults, ModelConfig, Nonlinearity, PositionalEmbedding};
pub use edit::{validate_edits, EditMode, EditRule};
pub use model::{ForwardOutput, RunOptions, Vit};
pub use tokens::{
    append_registers, base_roles, embed_image, patch_token, RegisterInit, TokenRole, TokenSequence,
};
pub use trace::{ActivationTrace, Site, TapSpec};
pub use weights::{
    load_weights, read_container, required_parameters, resolve_parameters, save_weights,
    write_container, LayerWeights, NameRemap, Norm, StorageDtype, VitWeights, WeightStore,
};
