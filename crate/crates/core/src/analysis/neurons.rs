// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::outliers::find_outliers;
use crate::tensor::{self, Tensor};
use crate::vit::{ActivationTrace, Site, TokenRole, Vit};
use crate::{Error, Result};

/// Which patch of each image feeds [`neuron_activation_stats`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchSelector {
    /// Highest-norm outlier.
    TopOutlier,
    /// Uniform draw among patches below the threshold.
    RandomNonOutlier { seed: u64 },
}

/// Per-neuron mean activation over images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronStats {
    pub layer: usize,
    pub means: Vec<f32>,
    pub images_used: usize,
    /// Images with no eligible patch.
    pub images_skipped: usize,
}

/// Mean post-nonlinearity activation of every neuron at `layer` on one
/// selected patch per image. Outliers are measured at `measure_layer`.
pub fn neuron_activation_stats(
    traces: &[ActivationTrace],
    layer: usize,
    selector: PatchSelector,
    threshold: f32,
    measure_layer: usize,
) -> Result<NeuronStats> {
    let mut rng = match selector {
        PatchSelector::RandomNonOutlier { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        PatchSelector::TopOutlier => None,
    };
    let mut sum: Option<Vec<f64>> = None;
    let (mut used, mut skipped) = (0, 0);
    for trace in traces {
        let hidden = trace.get(layer, Site::MlpHiddenActivation)?;
        let outliers = find_outliers(trace, measure_layer, threshold)?;
        let chosen = match (&mut rng, outliers.top()) {
            (None, top) => top,
            (Some(rng), _) => {
                let pool: Vec<usize> = trace
                    .patch_indices()
                    .into_iter()
                    .filter(|i| !outliers.positions.contains(i))
                    .collect();
                (!pool.is_empty()).then(|| pool[rng.random_range(0..pool.len())])
            }
        };
        let Some(p) = chosen else {
            skipped += 1;
            continue;
        };
        let acc = sum.get_or_insert_with(|| vec![0.0; hidden.cols()]);
        for (a, &v) in acc.iter_mut().zip(hidden.row(p)) {
            *a += v as f64;
        }
        used += 1;
    }
    let n = traces
        .first()
        .map(|t| t.get(layer, Site::MlpHiddenActivation).map(Tensor::cols))
        .transpose()?
        .ok_or(Error::EmptyInput("image set"))?;
    let means = sum.map_or(vec![0.0; n], |s| {
        s.into_iter().map(|v| (v / used as f64) as f32).collect()
    });
    Ok(NeuronStats {
        layer,
        means,
        images_used: used,
        images_skipped: skipped,
    })
}

/// Lays per-token values over the patch grid.
fn to_grid(trace: &ActivationTrace, value: impl Fn(usize) -> f32) -> Result<Tensor> {
    let g = trace.grid;
    let mut out = Tensor::zeros(&[g, g]);
    for (i, r) in trace.roles.iter().enumerate() {
        if let TokenRole::Patch { row, col } = *r {
            out.data_mut()[row * g + col] = value(i);
        }
    }
    Ok(out)
}

/// One neuron's activations over the patch grid (CLS and registers dropped).
pub fn activation_map(trace: &ActivationTrace, layer: usize, neuron: usize) -> Result<Tensor> {
    let hidden = trace.get(layer, Site::MlpHiddenActivation)?;
    if neuron >= hidden.cols() {
        return Err(Error::Index {
            what: "neuron",
            index: neuron,
            len: hidden.cols(),
        });
    }
    to_grid(trace, |i| hidden.at(i, neuron))
}

/// Patch norm map at `(layer, site)`.
pub fn patch_norm_map(trace: &ActivationTrace, layer: usize, site: Site) -> Result<Tensor> {
    let norms = tensor::row_norms(trace.get(layer, site)?)?;
    to_grid(trace, |i| norms.data()[i])
}

/// CLS attention to each patch at `layer`, averaged over heads.
pub fn cls_attention_map(trace: &ActivationTrace, layer: usize) -> Result<Tensor> {
    let cls = trace.cls_index().ok_or(Error::EmptyInput("CLS token"))?;
    let w = trace.get(layer, Site::AttentionWeights)?;
    let (heads, t, cols) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    to_grid(trace, |i| {
        (0..heads)
            .map(|h| w.data()[(h * t + cls) * cols + i] as f64)
            .sum::<f64>() as f32
            / heads as f32
    })
}

/// CLS attention over every column at `layer`, averaged over heads.
pub fn cls_attention_row(trace: &ActivationTrace, layer: usize) -> Result<Vec<f32>> {
    let cls = trace.cls_index().ok_or(Error::EmptyInput("CLS token"))?;
    let w = trace.get(layer, Site::AttentionWeights)?;
    let (heads, t, cols) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    Ok((0..cols)
        .map(|j| {
            (0..heads)
                .map(|h| w.data()[(h * t + cls) * cols + j] as f64)
                .sum::<f64>() as f32
                / heads as f32
        })
        .collect())
}

/// Sorted absolute decoder weights of one neuron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderProfile {
    pub layer: usize,
    pub neuron: usize,
    /// `|w|` over output dimensions, descending.
    pub magnitudes: Vec<f32>,
    /// Output dimensions of the five largest `|w|`, descending (ties: lower dim).
    pub top_dims: Vec<usize>,
}

/// Magnitude spectrum of each neuron's MLP output-projection column.
pub fn decoder_weight_profile(
    model: &Vit,
    layer: usize,
    neurons: &[usize],
) -> Result<Vec<DecoderProfile>> {
    let lw = model
        .weights
        .layers
        .get(layer)
        .ok_or(Error::Index {
            what: "layer",
            index: layer,
            len: model.config.n_layers,
        })?;
    neurons
        .iter()
        .map(|&n| {
            if n >= model.config.mlp_hidden {
                return Err(Error::Index {
                    what: "neuron",
                    index: n,
                    len: model.config.mlp_hidden,
                });
            }
            let mut dims: Vec<(usize, f32)> = lw
                .fc2_weight
                .column(n)
                .into_iter()
                .map(f32::abs)
                .enumerate()
                .collect();
            dims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            Ok(DecoderProfile {
                layer,
                neuron: n,
                top_dims: dims.iter().take(5).map(|d| d.0).collect(),
                magnitudes: dims.into_iter().map(|d| d.1).collect(),
            })
        })
        .collect()
}
