// SPDX-License-Identifier: MIT OR Apache-2.0

//! Diagnostics computed from activation traces.

pub mod decompose;
pub mod neurons;
pub mod outliers;
pub mod profile;

pub use decompose::{cosine, decompose_attention, mean_row_cosine, DecompositionReport};
pub use neurons::{
    activation_map, cls_attention_map, cls_attention_row, decoder_weight_profile,
    neuron_activation_stats, patch_norm_map, DecoderProfile, NeuronStats, PatchSelector,
};
pub use outliers::{find_outliers, find_outliers_in, max_patch_norm, patch_norms, OutlierSet};
pub use profile::{norm_profile, NormProfile};
