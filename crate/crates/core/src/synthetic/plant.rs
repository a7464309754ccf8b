// SPDX-License-Identifier: MIT OR Apache-2.0

//! Planted register-neuron mechanism.
//!
//! A handful of residual dimensions are reserved and kept out of every
//! background weight, so their contents are controlled exactly:
//!
//! - a CLS marker, a patch marker and a trigger feature, which the planted
//!   neurons read through the pre-MLP layer norm;
//! - the designated outlier dimensions, written only by the planted neurons'
//!   decoders;
//! - a sink dimension, written only by the attention value channel that reads
//!   the designated dimensions.
//!
//! In fixed-position mode the trigger feature is a positional embedding at
//! one patch. In uniform-patch mode, layer-0 detector neurons measure local
//! texture with zero-sum filters and write it to the trigger feature; the
//! planted neurons fire where texture is absent.
//!
//! The planted neurons' input weights are calibrated on sample images so
//! non-trigger tokens sit far below zero (exactly zero after GELU) and trigger
//! tokens land at a chosen activation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::normal;
use crate::analysis::patch_norms;
use crate::io::{preprocess, Image};
use crate::registers::{NeuronId, RegisterScanConfig};
use crate::tensor::{self, Tensor};
use crate::vit::{
    append_registers, patch_token, ModelConfig, Nonlinearity, PositionalEmbedding, RegisterInit,
    Site, TapSpec, TokenSequence, Vit, WeightStore,
};
use crate::{Error, Result};

const CLS_MARK: f32 = 10.0;
const PATCH_MARK: f32 = 2.0;
const TRIGGER_MARK: f32 = 3.0;
const FILTERS: usize = 4;
const DETECTOR_GAIN: f32 = 1.5;
const TEXTURE_GAIN: f32 = 1.0;
/// Minimum summed filter response of a textured patch.
const TEXTURE_MIN: f64 = 2.5;
/// Pre-activation of planted neurons on the most trigger-like non-trigger token.
const OFF_PREACT: f64 = -30.0;
/// Trigger activations are anchored this far into the gap, leaving headroom
/// for images weaker than any seen in calibration.
const ANCHOR: f64 = 0.75;
const VALUE_SCALE: f32 = 2.0;
const SINK_WRITE: f32 = 0.15;
const CALIBRATION_IMAGES: usize = 16;
const MIN_SEPARATION: f32 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    /// Planted neurons fire on patches with no texture.
    UniformPatch,
    /// Planted neurons fire on one fixed patch.
    FixedPosition { row: usize, col: usize },
}

/// Recipe for a planted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub seed: u64,
    pub n_layers: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    /// Patches per side.
    pub grid: usize,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    pub planted: Vec<NeuronId>,
    pub ignite_layer: usize,
    pub trigger: Trigger,
    /// Decoder magnitude of each planted neuron along the outlier direction.
    pub outlier_gain: f32,
    /// Logit scale of later-layer CLS queries against outlier keys. Zero
    /// disables the sink.
    pub sink_strength: f32,
}

fn default_patch() -> usize {
    4
}

impl PlantSpec {
    /// A feasible spec drawn from `seed`.
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let n_layers = rng.random_range(4..=6);
        let embed_dim = [32, 48, 64][rng.random_range(0..3)];
        let n_heads = [2, 4][rng.random_range(0..2)];
        let mlp_hidden = rng.random_range(64..=128);
        let grid = 4;
        let ignite_layer = rng.random_range(1..=n_layers - 2);
        let count = rng.random_range(2..=4);
        let mut neurons: Vec<usize> = (0..mlp_hidden).collect();
        neurons.shuffle(&mut rng);
        let mut planted: Vec<NeuronId> = neurons[..count]
            .iter()
            .map(|&n| NeuronId::new(ignite_layer, n))
            .collect();
        planted.sort();
        let trigger = if rng.random_bool(0.5) {
            Trigger::UniformPatch
        } else {
            Trigger::FixedPosition {
                row: rng.random_range(0..grid),
                col: rng.random_range(0..grid),
            }
        };
        Self {
            seed,
            n_layers,
            embed_dim,
            n_heads,
            mlp_hidden,
            grid,
            patch_size: 4,
            planted,
            ignite_layer,
            trigger,
            outlier_gain: rng.random_range(4.0..6.0),
            sink_strength: rng.random_range(10.0..14.0),
        }
    }

    pub fn with_trigger(mut self, trigger: Trigger) -> Self {
        self.trigger = trigger;
        self
    }

    fn reserved_dims(&self) -> usize {
        5 + 3 + if self.trigger == Trigger::UniformPatch { 2 * FILTERS } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.n_layers < 2 || self.grid < 2 || self.n_heads == 0 || self.mlp_hidden == 0 {
            return bad("need at least 2 layers, a 2×2 grid, one head and one neuron".into());
        }
        if self.patch_size < 2 || !self.patch_size.is_multiple_of(2) {
            return bad(format!("patch_size {} must be even", self.patch_size));
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return bad(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.n_heads
            ));
        }
        if self.embed_dim < self.reserved_dims() + 8 {
            return bad(format!(
                "embed_dim {} leaves too few free dimensions (need {})",
                self.embed_dim,
                self.reserved_dims() + 8
            ));
        }
        if self.planted.is_empty() {
            return bad("no planted neurons".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for n in &self.planted {
            if !seen.insert(*n) {
                return bad(format!("planted neuron ({}, {}) repeated", n.layer, n.neuron));
            }
            if n.neuron >= self.mlp_hidden {
                return bad(format!("planted neuron index {} ≥ {}", n.neuron, self.mlp_hidden));
            }
            // Once one layer has created an outlier, the token's layer norm is
            // dominated by it, so every planted neuron reads the same layer.
            if n.layer != self.ignite_layer {
                return bad(format!(
                    "planted neuron at layer {} but ignite_layer is {}; all planted neurons sit at the ignite layer",
                    n.layer, self.ignite_layer
                ));
            }
        }
        if self.ignite_layer >= self.n_layers {
            return bad(format!("ignite_layer {} ≥ n_layers", self.ignite_layer));
        }
        if self.sink_strength > 0.0 && self.ignite_layer + 1 >= self.n_layers {
            return bad("a sink needs a layer after the ignite layer".into());
        }
        match self.trigger {
            Trigger::UniformPatch => {
                if self.ignite_layer == 0 {
                    return bad("uniform-patch trigger is detected at layer 0, so ignite_layer must be ≥ 1".into());
                }
                if self.mlp_hidden < 2 * FILTERS {
                    return bad(format!("need {} layer-0 neurons for texture detectors", 2 * FILTERS));
                }
            }
            Trigger::FixedPosition { row, col } => {
                if row >= self.grid || col >= self.grid {
                    return bad(format!("trigger ({row}, {col}) outside {0}×{0} grid", self.grid));
                }
            }
        }
        if !(self.outlier_gain.is_finite() && self.outlier_gain >= 0.0) {
            return bad(format!("outlier_gain {} must be finite and ≥ 0", self.outlier_gain));
        }
        if !(self.sink_strength.is_finite() && self.sink_strength >= 0.0) {
            return bad(format!("sink_strength {} must be finite and ≥ 0", self.sink_strength));
        }
        Ok(())
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            name: format!("planted-{}", self.seed),
            image_size: self.grid * self.patch_size,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            mlp_hidden: self.mlp_hidden,
            nonlinearity: Nonlinearity::Gelu,
            norm_eps: 1e-6,
            has_cls: true,
            positional_embedding: PositionalEmbedding::LearnedPerPosition,
            preprocess_mean: [0.5; 3],
            preprocess_std: [0.25; 3],
            final_norm: true,
            patch_bias: true,
            embed_norm: false,
            layer_scale: false,
        }
    }
}

/// Expected outliers of one generated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTruth {
    /// Token indices, ascending.
    pub outliers: Vec<usize>,
    /// Patches with no texture, as `(row, col)`.
    pub uniform_patches: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub planted: Vec<NeuronId>,
    pub ignite_layer: usize,
    /// Layer whose post-MLP residual defines outliers.
    pub analysis_layer: usize,
    pub threshold: f32,
    /// Largest non-outlier patch norm seen during calibration.
    pub background_max: f32,
    /// Smallest outlier patch norm seen during calibration; 0 with no outliers.
    pub outlier_min: f32,
    pub designated_dims: Vec<usize>,
    pub trigger: Trigger,
    /// Calibration images, in generation order.
    pub images: Vec<ImageTruth>,
}

impl GroundTruth {
    pub fn has_outliers(&self) -> bool {
        self.images.iter().any(|i| !i.outliers.is_empty())
    }
}

/// A generated image and its expected outliers.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedImage {
    pub image: Image,
    pub truth: ImageTruth,
}

/// Reserved dimensions and hand-set channels.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    cls: usize,
    patch: usize,
    trig: usize,
    sink: usize,
    null: usize,
    designated: Vec<usize>,
    dir: Vec<f32>,
    /// `(plus dim, minus dim, zero-sum filter)`.
    filters: Vec<(usize, usize, Vec<f32>)>,
    detectors: Vec<usize>,
    reserved: Vec<bool>,
    key_channel: Vec<usize>,
    value_channel: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct PlantedModel {
    pub spec: PlantSpec,
    pub config: ModelConfig,
    pub store: WeightStore,
    pub truth: GroundTruth,
    layout: Layout,
}

fn layout(spec: &PlantSpec, rng: &mut ChaCha8Rng) -> Layout {
    let d = spec.embed_dim;
    let mut perm: Vec<usize> = (0..d).collect();
    perm.shuffle(rng);
    let mut next = perm.into_iter();
    let mut take = || next.next().expect("validated width");
    let (cls, patch, trig, sink, null) = (take(), take(), take(), take(), take());
    let n_designated = rng.random_range(1..=3);
    let designated: Vec<usize> = (0..n_designated).map(|_| take()).collect();
    let mut dir: Vec<f32> = (0..n_designated)
        .map(|_| {
            let m: f32 = rng.random_range(0.5..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    let n = dir.iter().map(|v| v * v).sum::<f32>().sqrt();
    dir.iter_mut().for_each(|v| *v /= n);

    let p2 = spec.patch_size * spec.patch_size;
    let mut filters = Vec::new();
    let mut detectors = Vec::new();
    if spec.trigger == Trigger::UniformPatch {
        let scale = 1.0 / ((3 * p2) as f32).sqrt();
        for _ in 0..FILTERS {
            let mut f = Vec::with_capacity(3 * p2);
            for _ in 0..3 {
                let mut signs: Vec<f32> = (0..p2).map(|i| if i < p2 / 2 { scale } else { -scale }).collect();
                signs.shuffle(rng);
                f.extend(signs);
            }
            filters.push((take(), take(), f));
        }
        let mut pool: Vec<usize> = (0..spec.mlp_hidden).collect();
        pool.shuffle(rng);
        detectors = pool[..2 * FILTERS].to_vec();
    }
    let mut reserved = vec![false; d];
    for &r in [cls, patch, trig, sink, null]
        .iter()
        .chain(&designated)
        .chain(filters.iter().flat_map(|(a, b, _)| [a, b]))
    {
        reserved[r] = true;
    }
    let dh = d / spec.n_heads;
    let key_channel = (0..spec.n_heads).map(|_| rng.random_range(0..dh)).collect();
    let value_channel = (0..spec.n_heads).map(|_| rng.random_range(0..dh)).collect();
    Layout {
        cls,
        patch,
        trig,
        sink,
        null,
        designated,
        dir,
        filters,
        detectors,
        reserved,
        key_channel,
        value_channel,
    }
}

/// Dense row-major matrix under construction.
struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Mat {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Gaussian entries, except on reserved rows (outputs) and columns (inputs).
    fn background(
        rng: &mut ChaCha8Rng,
        rows: usize,
        cols: usize,
        std: f64,
        row_reserved: impl Fn(usize) -> bool,
        col_reserved: impl Fn(usize) -> bool,
    ) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let v = normal(rng, std);
                if !row_reserved(r) && !col_reserved(c) {
                    m.data[r * cols + c] = v;
                }
            }
        }
        m
    }

    fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    fn clear_row(&mut self, r: usize) {
        self.data[r * self.cols..(r + 1) * self.cols].fill(0.0);
    }

    fn clear_col(&mut self, c: usize) {
        for r in 0..self.rows {
            self.data[r * self.cols + c] = 0.0;
        }
    }

    fn tensor(self, shape: Vec<usize>) -> Tensor {
        Tensor::new(shape, self.data).expect("matching size")
    }
}

fn vector(rng: &mut ChaCha8Rng, len: usize, mean: f32, std: f64, reserved: &[bool], on_reserved: f32) -> Tensor {
    let data = (0..len)
        .map(|i| {
            let v = mean + normal(rng, std);
            if reserved[i] {
                on_reserved
            } else {
                v
            }
        })
        .collect();
    Tensor::new(vec![len], data).expect("positive length")
}

/// Weights before the planted neurons' input rows are calibrated.
fn build_store(spec: &PlantSpec, lay: &Layout, rng: &mut ChaCha8Rng) -> WeightStore {
    let config = spec.config();
    let d = spec.embed_dim;
    let n = spec.mlp_hidden;
    let p = spec.patch_size;
    let plen = 3 * p * p;
    let res = &lay.reserved;
    let is_reserved = |i: usize| res[i];
    let sd = |fan: usize, k: f64| k / (fan as f64).sqrt();
    let mut store = WeightStore::new();

    let mut pe = Mat::background(rng, d, plen, sd(plen, 0.4), is_reserved, |_| false);
    for (a, b, f) in &lay.filters {
        for (k, &v) in f.iter().enumerate() {
            pe.set(*a, k, v);
            pe.set(*b, k, -v);
        }
    }
    store.insert("patch_embed.weight", pe.tensor(vec![d, 3, p, p]));
    store.insert("patch_embed.bias", vector(rng, d, 0.0, 0.05, res, 0.0));
    let mut cls = vector(rng, d, 0.0, 0.3, res, 0.0);
    cls.data_mut()[lay.cls] = CLS_MARK;
    store.insert("cls_token", cls);
    let t0 = config.base_tokens();
    let mut pos = Mat::background(rng, t0, d, 0.2, |_| false, is_reserved);
    for t in 1..t0 {
        pos.set(t, lay.patch, PATCH_MARK);
    }
    if let Trigger::FixedPosition { row, col } = spec.trigger {
        pos.set(patch_token(&config, row, col), lay.trig, TRIGGER_MARK);
    }
    store.insert("pos_embed", pos.tensor(vec![t0, d]));

    let dh = d / spec.n_heads;
    let norm = |rng: &mut ChaCha8Rng, store: &mut WeightStore, name: &str| {
        store.insert(format!("{name}.weight"), vector(rng, d, 1.0, 0.05, res, 1.0));
        store.insert(format!("{name}.bias"), vector(rng, d, 0.0, 0.02, res, 0.0));
    };
    for l in 0..spec.n_layers {
        let b = format!("blocks.{l}");
        let sink_layer = spec.sink_strength > 0.0 && l > spec.ignite_layer;
        norm(rng, &mut store, &format!("{b}.norm1"));
        norm(rng, &mut store, &format!("{b}.norm2"));

        let mut qkv = Mat::zeros(3 * d, d);
        for (part, k) in [(0, 0.5), (1, 0.5), (2, 1.0)] {
            let m = Mat::background(rng, d, d, sd(d, k), |_| false, is_reserved);
            qkv.data[part * d * d..(part + 1) * d * d].copy_from_slice(&m.data);
        }
        let mut qkv_bias = vector(rng, 3 * d, 0.0, 0.02, &vec![false; 3 * d], 0.0);
        let mut proj = Mat::background(rng, d, d, sd(d, 0.3), is_reserved, |_| false);
        if sink_layer {
            for h in 0..spec.n_heads {
                let kc = h * dh + lay.key_channel[h];
                let vc = h * dh + lay.value_channel[h];
                for row in [kc, d + kc, 2 * d + vc] {
                    qkv.clear_row(row);
                    qkv_bias.data_mut()[row] = 0.0;
                }
                // Every original token queries the sink, with matched strength.
                let q = spec.sink_strength * (dh as f32).sqrt() / d as f32;
                qkv.set(kc, lay.cls, q);
                qkv.set(kc, lay.patch, q * CLS_MARK / PATCH_MARK);
                for (&dim, &w) in lay.designated.iter().zip(&lay.dir) {
                    qkv.set(d + kc, dim, w);
                    qkv.set(2 * d + vc, dim, VALUE_SCALE * w);
                }
                proj.clear_col(vc);
                proj.set(lay.sink, vc, SINK_WRITE / spec.n_heads as f32);
            }
        }
        store.insert(format!("{b}.attn.qkv.weight"), qkv.tensor(vec![3 * d, d]));
        store.insert(format!("{b}.attn.qkv.bias"), qkv_bias);
        store.insert(format!("{b}.attn.proj.weight"), proj.tensor(vec![d, d]));
        store.insert(format!("{b}.attn.proj.bias"), vector(rng, d, 0.0, 0.02, res, 0.0));

        let mut fc1 = Mat::background(rng, n, d, sd(d, 0.7), |_| false, is_reserved);
        let mut fc1_bias = vector(rng, n, 0.0, 0.05, &vec![false; n], 0.0);
        let mut fc2 = Mat::background(rng, d, n, sd(n, 0.3), is_reserved, |_| false);
        if l == 0 {
            for (k, (a, b, _)) in lay.filters.iter().enumerate() {
                for (sign, &neuron) in [1.0f32, -1.0].iter().zip(&lay.detectors[2 * k..2 * k + 2]) {
                    fc1.clear_row(neuron);
                    fc1.set(neuron, *a, sign * DETECTOR_GAIN / 2.0);
                    fc1.set(neuron, *b, -sign * DETECTOR_GAIN / 2.0);
                    fc1_bias.data_mut()[neuron] = 0.0;
                    fc2.clear_col(neuron);
                    fc2.set(lay.trig, neuron, TEXTURE_GAIN);
                }
            }
        }
        for pn in spec.planted.iter().filter(|p| p.layer == l) {
            fc1.clear_row(pn.neuron);
            fc1_bias.data_mut()[pn.neuron] = OFF_PREACT as f32;
            fc2.clear_col(pn.neuron);
            for (&dim, &w) in lay.designated.iter().zip(&lay.dir) {
                fc2.set(dim, pn.neuron, spec.outlier_gain * w);
            }
        }
        store.insert(format!("{b}.mlp.fc1.weight"), fc1.tensor(vec![n, d]));
        store.insert(format!("{b}.mlp.fc1.bias"), fc1_bias);
        store.insert(format!("{b}.mlp.fc2.weight"), fc2.tensor(vec![d, n]));
        store.insert(format!("{b}.mlp.fc2.bias"), vector(rng, d, 0.0, 0.02, res, 0.0));
    }
    norm(rng, &mut store, "norm");
    store
}

/// Direction in normalized residual space along which trigger tokens stand out.
fn trigger_readout(spec: &PlantSpec, lay: &Layout) -> Vec<(usize, f32)> {
    match spec.trigger {
        // Coefficients sum to zero so the layer norm's mean cancels.
        Trigger::FixedPosition { .. } => vec![(lay.trig, 1.0), (lay.cls, -1.0)],
        Trigger::UniformPatch => vec![
            (lay.patch, 1.0),
            (lay.cls, -1.0),
            (lay.trig, -1.0),
            (lay.null, 1.0),
        ],
    }
}

fn draw_image(spec: &PlantSpec, lay: &Layout, rng: &mut ChaCha8Rng) -> PlantedImage {
    let config = spec.config();
    let (g, p) = (spec.grid, spec.patch_size);
    let s = g * p;
    let mut img = Image::filled(s, s, [0, 0, 0]).expect("positive size");
    let mut cells: Vec<(usize, usize)> = (0..g).flat_map(|r| (0..g).map(move |c| (r, c))).collect();
    cells.shuffle(rng);
    let n_uniform = rng.random_range(1..=2);
    let mut uniform: Vec<(usize, usize)> = cells[..n_uniform].to_vec();
    uniform.sort();
    let norm = |v: u8, c: usize| (v as f64 / 255.0 - config.preprocess_mean[c] as f64) / config.preprocess_std[c] as f64;
    for r in 0..g {
        for c in 0..g {
            if uniform.contains(&(r, c)) {
                let color = [rng.random(), rng.random(), rng.random()];
                for y in 0..p {
                    for x in 0..p {
                        img.set_pixel(c * p + x, r * p + y, color);
                    }
                }
                continue;
            }
            loop {
                let px: Vec<[u8; 3]> = (0..p * p).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
                // Filter responses in the model's channel-major patch layout.
                let strength: f64 = if lay.filters.is_empty() {
                    f64::INFINITY
                } else {
                    lay.filters
                        .iter()
                        .map(|(_, _, f)| {
                            let mut acc = 0.0;
                            for ch in 0..3 {
                                for (i, rgb) in px.iter().enumerate() {
                                    acc += f[ch * p * p + i] as f64 * norm(rgb[ch], ch);
                                }
                            }
                            acc.abs()
                        })
                        .sum()
                };
                if strength >= TEXTURE_MIN {
                    for (i, rgb) in px.into_iter().enumerate() {
                        img.set_pixel(c * p + i % p, r * p + i / p, rgb);
                    }
                    break;
                }
            }
        }
    }
    let mut outliers: Vec<usize> = if spec.outlier_gain == 0.0 {
        Vec::new()
    } else {
        match spec.trigger {
            Trigger::UniformPatch => uniform.iter().map(|&(r, c)| patch_token(&config, r, c)).collect(),
            Trigger::FixedPosition { row, col } => vec![patch_token(&config, row, col)],
        }
    };
    outliers.sort();
    PlantedImage {
        image: img,
        truth: ImageTruth {
            outliers,
            uniform_patches: uniform,
        },
    }
}

/// Builds a planted model and checks its separation margin.
pub fn generate_planted_model(spec: &PlantSpec) -> Result<PlantedModel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lay = layout(spec, &mut rng);
    let mut store = build_store(spec, &lay, &mut rng);
    let config = spec.config();
    let ignite = spec.ignite_layer;
    let analysis = spec.n_layers - 1;

    let mut img_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x5eed));
    let calib: Vec<PlantedImage> = (0..CALIBRATION_IMAGES)
        .map(|_| draw_image(spec, &lay, &mut img_rng))
        .collect();
    let trigger_tokens = |im: &PlantedImage| -> Vec<usize> {
        match spec.trigger {
            Trigger::UniformPatch => im
                .truth
                .uniform_patches
                .iter()
                .map(|&(r, c)| patch_token(&config, r, c))
                .collect(),
            Trigger::FixedPosition { row, col } => vec![patch_token(&config, row, col)],
        }
    };

    // Calibrate the readout on unedited runs, with and without a register.
    let vit = Vit::new(config.clone(), &store)?;
    let readout = trigger_readout(spec, &lay);
    let norm2 = &vit.layer(ignite).norm2;
    let taps = TapSpec::none().with(ignite, Site::PostAttentionResidual);
    let (mut trig_min, mut trig_max, mut other_max) = (f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for im in &calib {
        let seq = vit.embed(&preprocess(&im.image, &config)?)?;
        let triggers = trigger_tokens(im);
        for s in [seq.clone(), append_registers(&seq, 1, RegisterInit::Zeros)?] {
            let x = vit.forward(&s, &taps, &[])?.trace.get(ignite, Site::PostAttentionResidual)?.clone();
            let h = tensor::layernorm(&x, &norm2.gain, &norm2.bias, config.norm_eps)?;
            for t in 0..h.rows() {
                let v: f64 = readout.iter().map(|&(j, w)| w as f64 * h.at(t, j) as f64).sum();
                if triggers.contains(&t) {
                    trig_min = trig_min.min(v);
                    trig_max = trig_max.max(v);
                } else {
                    other_max = other_max.max(v);
                }
            }
        }
    }
    let gap = trig_min - other_max;
    if !(gap > 0.5) {
        return Err(Error::Spec(format!(
            "trigger tokens not separable at layer {ignite}: readout gap {gap:.3}"
        )));
    }
    log::debug!("planted readout: others ≤ {other_max:.3}, triggers in [{trig_min:.3}, {trig_max:.3}]");
    let anchor = other_max + ANCHOR * gap;
    let b = format!("blocks.{ignite}.mlp");
    for pn in &spec.planted {
        let target: f64 = rng.random_range(8.0..12.0);
        let slope = (target - OFF_PREACT) / (anchor - other_max);
        let w = store.get_mut(&format!("{b}.fc1.weight"))?;
        let cols = w.cols();
        for &(j, c) in &readout {
            w.data_mut()[pn.neuron * cols + j] = (slope * c as f64) as f32;
        }
        store.get_mut(&format!("{b}.fc1.bias"))?.data_mut()[pn.neuron] =
            (OFF_PREACT - slope * other_max) as f32;
    }

    // Measure the separation the finished model achieves.
    let vit = Vit::new(config.clone(), &store)?;
    let taps = TapSpec::none().with(analysis, Site::PostMlpResidual);
    let (mut bg_max, mut out_min) = (0f32, f32::INFINITY);
    for im in &calib {
        let seq = vit.embed(&preprocess(&im.image, &config)?)?;
        let trace = vit.forward(&seq, &taps, &[])?.trace;
        for (t, norm) in patch_norms(&trace, analysis, Site::PostMlpResidual)? {
            if im.truth.outliers.contains(&t) {
                out_min = out_min.min(norm);
            } else {
                bg_max = bg_max.max(norm);
            }
        }
    }
    let has_outliers = spec.outlier_gain > 0.0;
    let threshold = if has_outliers {
        let ratio = out_min / bg_max;
        if !(ratio >= MIN_SEPARATION) {
            return Err(Error::Spec(format!(
                "outlier_gain {} separates outliers only {ratio:.2}× from background (need {MIN_SEPARATION}×)",
                spec.outlier_gain
            )));
        }
        (bg_max * out_min).sqrt()
    } else {
        MIN_SEPARATION * bg_max
    };
    let truth = GroundTruth {
        planted: spec.planted.clone(),
        ignite_layer: ignite,
        analysis_layer: analysis,
        threshold,
        background_max: bg_max,
        outlier_min: if has_outliers { out_min } else { 0.0 },
        designated_dims: lay.designated.clone(),
        trigger: spec.trigger,
        images: calib.into_iter().map(|i| i.truth).collect(),
    };
    Ok(PlantedModel {
        spec: spec.clone(),
        config,
        store,
        truth,
        layout: lay,
    })
}

impl PlantedModel {
    pub fn vit(&self) -> Result<Vit> {
        Vit::new(self.config.clone(), &self.store)
    }

    /// Fresh images from the calibration distribution.
    pub fn images(&self, count: usize, seed: u64) -> Vec<PlantedImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ self.spec.seed.rotate_left(17));
        (0..count)
            .map(|_| draw_image(&self.spec, &self.layout, &mut rng))
            .collect()
    }

    pub fn embed(&self, vit: &Vit, image: &PlantedImage) -> Result<TokenSequence> {
        vit.embed(&preprocess(&image.image, &self.config)?)
    }

    /// Scan settings matching the planted mechanism, with `top_k = |planted|`.
    pub fn scan_config(&self) -> RegisterScanConfig {
        RegisterScanConfig {
            top_layer: self.truth.ignite_layer,
            top_k: self.truth.planted.len(),
            outlier_threshold: self.truth.threshold,
            outlier_measure_layer: self.truth.analysis_layer,
            images: 0,
        }
    }
}
