// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention-bias substitute for a test-time register.

use serde::{Deserialize, Serialize};

use super::plan::{apply_plan, plan_test_time_register};
use super::scan::NeuronId;
use crate::vit::{AttentionBias, HeadBias, RegisterInit, Site, TapSpec, TokenSequence, Vit};
use crate::{Error, Result};

/// Which layers receive a bias column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasScope {
    /// Every layer. The register also attends and is attended to below the
    /// first edited layer, so this is what makes replay match a register run.
    #[default]
    AllLayers,
    /// Only layers at or above the lowest edited layer.
    FromFirstIntervention,
}

/// Mean per-head key and value of a single zero-initialized register, taken
/// over the calibration images.
pub fn derive_attention_bias(
    model: &Vit,
    calibration: &[TokenSequence],
    neurons: &[NeuronId],
    scope: BiasScope,
) -> Result<AttentionBias> {
    if calibration.is_empty() {
        return Err(Error::EmptyInput("calibration set"));
    }
    let c = &model.config;
    let first = match scope {
        BiasScope::AllLayers => 0,
        BiasScope::FromFirstIntervention => neurons
            .iter()
            .map(|n| n.layer)
            .min()
            .ok_or_else(|| Error::Plan("no neurons to intervene on".into()))?,
    };
    let layers: Vec<usize> = (first..c.n_layers).collect();
    let mut taps = TapSpec::none();
    for &l in &layers {
        taps.insert(l, Site::AttentionKeys);
        taps.insert(l, Site::AttentionValues);
    }
    let plan = plan_test_time_register(neurons, 1, RegisterInit::Zeros)?;
    let dh = c.head_dim();
    let runs = crate::par::map(calibration, |seq| -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let run = apply_plan(model, seq, &plan, &taps, None)?;
        let r = seq.len();
        let t = r + 1;
        let mut per = Vec::with_capacity(layers.len() * c.n_heads);
        for &l in &layers {
            let k = run.output.trace.get(l, Site::AttentionKeys)?;
            let v = run.output.trace.get(l, Site::AttentionValues)?;
            for h in 0..c.n_heads {
                let span = (h * t + r) * dh..(h * t + r + 1) * dh;
                per.push((
                    k.data()[span.clone()].iter().map(|&x| x as f64).collect(),
                    v.data()[span].iter().map(|&x| x as f64).collect(),
                ));
            }
        }
        Ok(per)
    });
    let mut sum: Vec<(Vec<f64>, Vec<f64>)> = vec![(vec![0.0; dh], vec![0.0; dh]); layers.len() * c.n_heads];
    for run in runs {
        for (acc, (k, v)) in sum.iter_mut().zip(run?) {
            acc.0.iter_mut().zip(k).for_each(|(a, b)| *a += b);
            acc.1.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
    }
    let m = calibration.len() as f64;
    let mean = |xs: &[f64]| xs.iter().map(|x| (x / m) as f32).collect::<Vec<_>>();
    let mut bias = AttentionBias {
        calibration_size: calibration.len(),
        ..Default::default()
    };
    for (i, &l) in layers.iter().enumerate() {
        let heads = sum[i * c.n_heads..(i + 1) * c.n_heads]
            .iter()
            .map(|(k, v)| HeadBias {
                key: mean(k),
                value: mean(v),
            })
            .collect();
        bias.layers.insert(l, heads);
    }
    Ok(bias)
}
