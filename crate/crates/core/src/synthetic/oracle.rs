// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::analysis::max_patch_norm;
use crate::registers::NeuronId;
use crate::vit::{EditRule, RunOptions, Site, TapSpec, TokenSequence, Vit};
use crate::{Error, Result};

/// Mean drop in the analysis layer's max patch norm when one neuron is zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronDrop {
    pub layer: usize,
    pub neuron: usize,
    pub drop: f32,
}

impl NeuronDrop {
    pub fn id(&self) -> NeuronId {
        NeuronId::new(self.layer, self.neuron)
    }
}

/// Zeroes every neuron in layers `0..=top_layer` on its own and ranks them by
/// how much the max patch norm at `analysis_layer` falls, averaged over
/// `images`. Descending; ties go to the lower layer, then lower neuron.
///
/// One forward pass per (neuron, image), resumed from the neuron's layer.
pub fn brute_force_register_scan(
    model: &Vit,
    images: &[TokenSequence],
    top_layer: usize,
    analysis_layer: usize,
) -> Result<Vec<NeuronDrop>> {
    let c = &model.config;
    if images.is_empty() {
        return Err(Error::EmptyInput("oracle image set"));
    }
    for (what, l) in [("top_layer", top_layer), ("analysis_layer", analysis_layer)] {
        if l >= c.n_layers {
            return Err(Error::Index {
                what,
                index: l,
                len: c.n_layers,
            });
        }
    }
    let mut entry_taps = TapSpec::none().with(analysis_layer, Site::PostMlpResidual);
    for l in 0..top_layer {
        entry_taps.insert(l, Site::PostMlpResidual);
    }
    // Residual stream entering each scanned layer, plus the baseline score.
    let mut entries = Vec::with_capacity(images.len());
    for seq in images {
        let trace = model.forward(seq, &entry_taps, &[])?.trace;
        let base = max_patch_norm(&trace, analysis_layer, Site::PostMlpResidual)?.1;
        let mut inputs = vec![seq.clone()];
        for l in 0..top_layer {
            inputs.push(TokenSequence {
                tokens: trace.get(l, Site::PostMlpResidual)?.clone(),
                roles: seq.roles.clone(),
            });
        }
        entries.push((inputs, base));
    }
    let taps = TapSpec::none().with(analysis_layer, Site::PostMlpResidual);
    let candidates: Vec<NeuronId> = (0..=top_layer)
        .flat_map(|l| (0..c.mlp_hidden).map(move |n| NeuronId::new(l, n)))
        .collect();
    let drops = crate::par::map(&candidates, |id| -> Result<f64> {
        let edit = [EditRule::zero(id.layer, id.neuron)];
        let mut total = 0f64;
        for (inputs, base) in &entries {
            let out = model.forward_from(
                id.layer,
                &inputs[id.layer],
                RunOptions {
                    taps: &taps,
                    edits: &edit,
                    bias: None,
                },
            )?;
            let edited = max_patch_norm(&out.trace, analysis_layer, Site::PostMlpResidual)?.1;
            total += (*base - edited) as f64;
        }
        Ok(total / entries.len() as f64)
    });
    let mut ranked = candidates
        .iter()
        .zip(drops)
        .map(|(id, d)| {
            Ok(NeuronDrop {
                layer: id.layer,
                neuron: id.neuron,
                drop: d? as f32,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| {
        b.drop
            .total_cmp(&a.drop)
            .then(a.layer.cmp(&b.layer))
            .then(a.neuron.cmp(&b.neuron))
    });
    Ok(ranked)
}
