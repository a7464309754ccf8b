// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::Path;

use super::attention::{attention_with_bias, linear, AttentionBias};
use super::config::{ModelConfig, Nonlinearity};
use super::edit::{apply_edits, validate_edits, EditRule};
use super::tokens::{embed_image, TokenSequence};
use super::trace::{ActivationTrace, Site, TapSpec};
use super::weights::{load_weights, LayerWeights, NameRemap, Norm, VitWeights, WeightStore};
use crate::tensor::{self, Tensor, TensorError};
use crate::{Error, Result};

/// Per-call knobs for [`Vit::forward_with`].
#[derive(Debug, Clone, Copy)]
pub struct RunOptions<'a> {
    pub taps: &'a TapSpec,
    pub edits: &'a [EditRule],
    pub bias: Option<&'a AttentionBias>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Final token states, after the final norm when the config has one.
    pub outputs: Tensor,
    pub trace: ActivationTrace,
}

/// An immutable, shareable model.
#[derive(Debug, Clone)]
pub struct Vit {
    pub config: ModelConfig,
    pub weights: VitWeights,
}

impl Vit {
    pub fn new(config: ModelConfig, store: &WeightStore) -> Result<Self> {
        config.validate()?;
        let weights = VitWeights::from_store(store, &config)?;
        Ok(Self { config, weights })
    }

    pub fn load(path: &Path, config: ModelConfig, remap: Option<&NameRemap>) -> Result<Self> {
        let store = load_weights(path, &config, remap)?;
        Self::new(config, &store)
    }

    pub fn embed(&self, pixels: &Tensor) -> Result<TokenSequence> {
        embed_image(pixels, &self.config, &self.weights)
    }

    pub fn layer(&self, l: usize) -> &LayerWeights {
        &self.weights.layers[l]
    }

    pub fn norm(&self, x: &Tensor, n: &Norm) -> Result<Tensor> {
        Ok(tensor::layernorm(x, &n.gain, &n.bias, self.config.norm_eps)?)
    }

    pub fn forward(
        &self,
        seq: &TokenSequence,
        taps: &TapSpec,
        edits: &[EditRule],
    ) -> Result<ForwardOutput> {
        self.forward_with(
            seq,
            RunOptions {
                taps,
                edits,
                bias: None,
            },
        )
    }

    /// Pre-norm blocks: `x += Attn(LN₁(x))`, then `x += MLP(LN₂(x))`.
    ///
    /// Edits rewrite post-nonlinearity MLP columns before the down-projection.
    /// Taps record values after edits.
    pub fn forward_with(&self, seq: &TokenSequence, opts: RunOptions<'_>) -> Result<ForwardOutput> {
        self.forward_from(0, seq, opts)
    }

    /// Runs blocks `start..` on `seq`, taken as the residual stream entering
    /// block `start`. Edits and biases at earlier layers are ignored.
    pub fn forward_from(
        &self,
        start: usize,
        seq: &TokenSequence,
        opts: RunOptions<'_>,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        if start > c.n_layers {
            return Err(Error::Index {
                what: "start layer",
                index: start,
                len: c.n_layers + 1,
            });
        }
        let (t, d) = seq.tokens.dims2("forward")?;
        if d != c.embed_dim || seq.roles.len() != t {
            return Err(TensorError::Dimension {
                op: "forward",
                detail: format!(
                    "sequence [{t} × {d}] with {} roles, model width {}",
                    seq.roles.len(),
                    c.embed_dim
                ),
            }
            .into());
        }
        validate_edits(opts.edits, c, t)?;
        if let Some(b) = opts.bias {
            if let Some(&l) = b.layers.keys().find(|&&l| l >= c.n_layers) {
                return Err(Error::Index {
                    what: "attention bias layer",
                    index: l,
                    len: c.n_layers,
                });
            }
        }

        let mut entries = BTreeMap::new();
        let mut pre_edit = BTreeMap::new();
        let mut x = seq.tokens.clone();
        for (l, lw) in self.weights.layers.iter().enumerate().skip(start) {
            let h = self.norm(&x, &lw.norm1)?;
            let bias = opts.bias.and_then(|b| b.layer(l));
            let attn = attention_with_bias(&h, lw, c.n_heads, bias)?;
            residual_add(&mut x, &attn.output, lw.ls1.as_deref(), "attention_residual")?;
            let mut record = |site: Site, v: Tensor| {
                if opts.taps.contains(l, site) {
                    entries.insert((l, site), v);
                }
            };
            record(Site::AttentionWeights, attn.weights);
            record(Site::AttentionKeys, attn.keys);
            record(Site::AttentionValues, attn.values);
            record(Site::PostAttentionResidual, x.clone());

            let h = self.norm(&x, &lw.norm2)?;
            let pre = linear(&h, &lw.fc1_weight, &lw.fc1_bias)?;
            let mut hidden = match c.nonlinearity {
                Nonlinearity::Gelu => tensor::gelu(&pre)?,
                Nonlinearity::QuickGelu => tensor::quick_gelu(&pre)?,
            };
            apply_edits(
                &mut hidden,
                opts.edits.iter().filter(|e| e.layer == l),
                |rule, column| {
                    if opts.taps.record_pre_edit {
                        pre_edit.insert((rule.layer, rule.neuron), column);
                    }
                },
            );
            let down = linear(&hidden, &lw.fc2_weight, &lw.fc2_bias)?;
            if opts.taps.contains(l, Site::MlpHiddenActivation) {
                entries.insert((l, Site::MlpHiddenActivation), hidden);
            }
            residual_add(&mut x, &down, lw.ls2.as_deref(), "mlp_residual")?;
            if opts.taps.contains(l, Site::PostMlpResidual) {
                entries.insert((l, Site::PostMlpResidual), x.clone());
            }
        }
        let outputs = match &self.weights.final_norm {
            Some(n) => self.norm(&x, n)?,
            None => x.clone(),
        };
        Ok(ForwardOutput {
            outputs,
            trace: ActivationTrace {
                entries,
                roles: seq.roles.clone(),
                grid: c.grid(),
                pre_final_norm: x,
                pre_edit,
            },
        })
    }
}

fn residual_add(
    x: &mut Tensor,
    update: &Tensor,
    scale: Option<&[f32]>,
    op: &'static str,
) -> Result<()> {
    let d = x.cols();
    for (xr, ur) in x.data_mut().chunks_mut(d).zip(update.data().chunks(d)) {
        match scale {
            Some(s) => xr
                .iter_mut()
                .zip(ur)
                .zip(s)
                .for_each(|((a, b), g)| *a += g * b),
            None => xr.iter_mut().zip(ur).for_each(|(a, b)| *a += b),
        }
    }
    x.check_finite(op)?;
    Ok(())
}
