// SPDX-License-Identifier: MIT OR Apache-2.0

//! Register-neuron discovery.
//!
//! For every image, find its outlier patches at the measurement layer, then
//! average each scanned neuron's activation over those patches. Scores are the
//! mean of these per-image averages over the images that had outliers; the
//! neurons with the highest scores are the register neurons.

use serde::{Deserialize, Serialize};

use crate::analysis::find_outliers;
use crate::tensor::Tensor;
use crate::vit::{ActivationTrace, Site, TapSpec, TokenSequence, Vit};
use crate::{Error, Result};

/// An MLP hidden unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub neuron: usize,
}

impl NeuronId {
    pub fn new(layer: usize, neuron: usize) -> Self {
        Self { layer, neuron }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegisterScanConfig {
    /// Highest layer scanned (inclusive).
    pub top_layer: usize,
    pub top_k: usize,
    pub outlier_threshold: f32,
    /// Layer whose post-MLP residual defines the outlier patches.
    pub outlier_measure_layer: usize,
    /// Size of the image set; filled in by the scan.
    #[serde(default)]
    pub images: usize,
}

impl RegisterScanConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Plan("top_k must be at least 1".into()));
        }
        if self.top_layer >= n_layers {
            return Err(Error::Index {
                what: "top_layer",
                index: self.top_layer,
                len: n_layers,
            });
        }
        if self.outlier_measure_layer >= n_layers {
            return Err(Error::Index {
                what: "outlier_measure_layer",
                index: self.outlier_measure_layer,
                len: n_layers,
            });
        }
        Ok(())
    }

    /// Taps the scan needs.
    pub fn taps(&self) -> TapSpec {
        let mut t = TapSpec::none().with(self.outlier_measure_layer, Site::PostMlpResidual);
        for l in 0..=self.top_layer {
            t.insert(l, Site::MlpHiddenActivation);
        }
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedNeuron {
    pub layer: usize,
    pub neuron: usize,
    pub score: f32,
}

impl RankedNeuron {
    pub fn id(&self) -> NeuronId {
        NeuronId::new(self.layer, self.neuron)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterScanResult {
    pub config: RegisterScanConfig,
    /// `[(top_layer + 1) × N]` averaged activations at outlier patches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_act: Option<Tensor>,
    /// Top-k by descending score; ties go to the lower layer, then lower neuron.
    pub ranked: Vec<RankedNeuron>,
    pub skipped_images: usize,
}

impl RegisterScanResult {
    pub fn neurons(&self) -> Vec<NeuronId> {
        self.ranked.iter().map(RankedNeuron::id).collect()
    }
}

/// Per-image mean activation over outlier patches, or `None` if outlier-free.
fn image_average(trace: &ActivationTrace, scan: &RegisterScanConfig) -> Result<Option<Vec<f64>>> {
    let outliers = find_outliers(trace, scan.outlier_measure_layer, scan.outlier_threshold)?;
    if outliers.is_empty() {
        return Ok(None);
    }
    let mut out = Vec::new();
    for l in 0..=scan.top_layer {
        let h = trace.get(l, Site::MlpHiddenActivation)?;
        let mut acc = vec![0f64; h.cols()];
        for &p in &outliers.positions {
            for (a, &v) in acc.iter_mut().zip(h.row(p)) {
                *a += v as f64;
            }
        }
        out.extend(acc.into_iter().map(|a| a / outliers.len() as f64));
    }
    Ok(Some(out))
}

/// Ranks neurons from precomputed traces.
pub fn scan_traces(traces: &[ActivationTrace], scan: &RegisterScanConfig) -> Result<RegisterScanResult> {
    if traces.is_empty() {
        return Err(Error::EmptyInput("scan image set"));
    }
    let per_image = crate::par::map(traces, |t| image_average(t, scan));
    reduce(per_image, traces.len(), scan)
}

fn reduce(
    per_image: Vec<Result<Option<Vec<f64>>>>,
    m: usize,
    scan: &RegisterScanConfig,
) -> Result<RegisterScanResult> {
    let mut sum: Option<Vec<f64>> = None;
    let (mut used, mut skipped) = (0usize, 0usize);
    // Fixed image order keeps the reduction bit-reproducible.
    for r in per_image {
        match r? {
            Some(v) => {
                let acc = sum.get_or_insert_with(|| vec![0.0; v.len()]);
                acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
                used += 1;
            }
            None => skipped += 1,
        }
    }
    let sum = sum.ok_or(Error::EmptyScan)?;
    let layers = scan.top_layer + 1;
    let n = sum.len() / layers;
    let scores: Vec<f32> = sum.iter().map(|s| (s / used as f64) as f32).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let ranked = order
        .into_iter()
        .take(scan.top_k)
        .map(|i| RankedNeuron {
            layer: i / n,
            neuron: i % n,
            score: scores[i],
        })
        .collect();
    let mut config = *scan;
    config.images = m;
    Ok(RegisterScanResult {
        config,
        avg_act: Some(Tensor::new(vec![layers, n], scores)?),
        ranked,
        skipped_images: skipped,
    })
}

/// Runs the scan over embedded images.
pub fn find_register_neurons(
    model: &Vit,
    images: &[TokenSequence],
    scan: &RegisterScanConfig,
) -> Result<RegisterScanResult> {
    scan.validate(model.config.n_layers)?;
    if images.is_empty() {
        return Err(Error::EmptyInput("scan image set"));
    }
    let taps = scan.taps();
    let per_image = crate::par::map(images, |seq| {
        let out = model.forward(seq, &taps, &[])?;
        image_average(&out.trace, scan)
    });
    reduce(per_image, images.len(), scan)
}
