// SPDX-License-Identifier: MIT OR Apache-2.0

//! A deliberately naive forward pass in `f64`, reading weights by name.
//!
//! Shares nothing with the runtime's kernels, so agreement between the two is
//! evidence that both are right.

use crate::tensor::Tensor;
use crate::vit::{EditMode, EditRule, ModelConfig, Nonlinearity, WeightStore};
use crate::Result;

type Mat = Vec<Vec<f64>>;

/// Outputs of [`reference_forward`].
#[derive(Debug, Clone)]
pub struct ReferenceOutput {
    /// Final token states (after the final norm if configured).
    pub outputs: Tensor,
    /// Residual stream after each block.
    pub post_mlp: Vec<Tensor>,
}

fn param(store: &WeightStore, name: &str) -> Result<Vec<f64>> {
    Ok(store.get(name)?.data().iter().map(|&v| v as f64).collect())
}

fn to_tensor(m: &Mat) -> Result<Tensor> {
    let rows = m.len();
    let cols = m[0].len();
    Ok(Tensor::new(
        vec![rows, cols],
        m.iter().flatten().map(|&v| v as f32).collect(),
    )?)
}

/// `y[i][o] = Σ_k x[i][k] · w[o·cols + k] + b[o]`.
fn linear(x: &Mat, w: &[f64], b: &[f64]) -> Mat {
    let inputs = x[0].len();
    let outputs = b.len();
    let mut y = vec![vec![0.0; outputs]; x.len()];
    for (i, row) in x.iter().enumerate() {
        for o in 0..outputs {
            let mut s = b[o];
            for k in 0..inputs {
                s += row[k] * w[o * inputs + k];
            }
            y[i][o] = s;
        }
    }
    y
}

fn layernorm(x: &Mat, gain: &[f64], bias: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

fn activation(kind: Nonlinearity, x: f64) -> f64 {
    match kind {
        Nonlinearity::Gelu => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
        }
        Nonlinearity::QuickGelu => x / (1.0 + (-1.702 * x).exp()),
    }
}

fn apply_edit(hidden: &mut Mat, rule: &EditRule) {
    let n = rule.neuron;
    let peak = hidden.iter().map(|r| r[n]).fold(f64::NEG_INFINITY, f64::max);
    for row in hidden.iter_mut() {
        row[n] = 0.0;
    }
    let value = match rule.mode {
        EditMode::Zero => return,
        EditMode::MoveMax => peak,
        EditMode::SetValues => rule.explicit_value.unwrap_or(0.0) as f64,
    };
    for &t in &rule.targets {
        hidden[t][n] = value;
    }
}

/// Embeds `[3 × S × S]` pixels by looping over every patch and kernel tap.
pub fn reference_embed(pixels: &Tensor, config: &ModelConfig, store: &WeightStore) -> Result<Tensor> {
    let (d, p, g, s) = (config.embed_dim, config.patch_size, config.grid(), config.image_size);
    let w = param(store, "patch_embed.weight")?;
    let bias = if config.patch_bias {
        param(store, "patch_embed.bias")?
    } else {
        vec![0.0; d]
    };
    let pos = param(store, "pos_embed")?;
    let px = pixels.data();
    let mut rows: Mat = Vec::new();
    if config.has_cls {
        let cls = param(store, "cls_token")?;
        rows.push((0..d).map(|j| cls[j] + pos[j]).collect());
    }
    let off = usize::from(config.has_cls);
    for r in 0..g {
        for c in 0..g {
            let t = off + r * g + c;
            let mut row = vec![0.0; d];
            for (o, out) in row.iter_mut().enumerate() {
                let mut acc = bias[o] + pos[t * d + o];
                for ch in 0..3 {
                    for ky in 0..p {
                        for kx in 0..p {
                            let pix = px[ch * s * s + (r * p + ky) * s + c * p + kx] as f64;
                            acc += pix * w[((o * 3 + ch) * p + ky) * p + kx];
                        }
                    }
                }
                *out = acc;
            }
            rows.push(row);
        }
    }
    if config.embed_norm {
        rows = layernorm(
            &rows,
            &param(store, "pre_norm.weight")?,
            &param(store, "pre_norm.bias")?,
            config.norm_eps as f64,
        );
    }
    to_tensor(&rows)
}

/// The full encoder on an embedded `[T × d]` sequence, with optional edits.
pub fn reference_forward(
    tokens: &Tensor,
    config: &ModelConfig,
    store: &WeightStore,
    edits: &[EditRule],
) -> Result<ReferenceOutput> {
    let d = config.embed_dim;
    let heads = config.n_heads;
    let dh = d / heads;
    let eps = config.norm_eps as f64;
    let t = tokens.rows();
    let mut x: Mat = (0..t)
        .map(|i| tokens.row(i).iter().map(|&v| v as f64).collect())
        .collect();
    let mut post_mlp = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let p = |s: &str| param(store, &format!("blocks.{l}.{s}"));
        let h = layernorm(&x, &p("norm1.weight")?, &p("norm1.bias")?, eps);
        let qkv = linear(&h, &p("attn.qkv.weight")?, &p("attn.qkv.bias")?);
        let mut mixed = vec![vec![0.0; d]; t];
        for hd in 0..heads {
            let q = |i: usize, k: usize| qkv[i][hd * dh + k];
            let key = |i: usize, k: usize| qkv[i][d + hd * dh + k];
            let val = |i: usize, k: usize| qkv[i][2 * d + hd * dh + k];
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| (0..dh).map(|k| q(i, k) * key(j, k)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for k in 0..dh {
                    mixed[i][hd * dh + k] = (0..t).map(|j| e[j] / z * val(j, k)).sum();
                }
            }
        }
        let attn = linear(&mixed, &p("attn.proj.weight")?, &p("attn.proj.bias")?);
        let ls1 = config.layer_scale.then(|| p("ls1")).transpose()?;
        for i in 0..t {
            for j in 0..d {
                x[i][j] += ls1.as_ref().map_or(1.0, |s| s[j]) * attn[i][j];
            }
        }

        let h = layernorm(&x, &p("norm2.weight")?, &p("norm2.bias")?, eps);
        let mut hidden = linear(&h, &p("mlp.fc1.weight")?, &p("mlp.fc1.bias")?);
        for row in hidden.iter_mut() {
            for v in row.iter_mut() {
                *v = activation(config.nonlinearity, *v);
            }
        }
        for rule in edits.iter().filter(|e| e.layer == l) {
            apply_edit(&mut hidden, rule);
        }
        let down = linear(&hidden, &p("mlp.fc2.weight")?, &p("mlp.fc2.bias")?);
        let ls2 = config.layer_scale.then(|| p("ls2")).transpose()?;
        for i in 0..t {
            for j in 0..d {
                x[i][j] += ls2.as_ref().map_or(1.0, |s| s[j]) * down[i][j];
            }
        }
        post_mlp.push(to_tensor(&x)?);
    }
    if config.final_norm {
        x = layernorm(&x, &param(store, "norm.weight")?, &param(store, "norm.bias")?, eps);
    }
    Ok(ReferenceOutput {
        outputs: to_tensor(&x)?,
        post_mlp,
    })
}
