// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    /// Zero the column, then write the column's original max at each target.
    MoveMax,
    /// Zero the column.
    Zero,
    /// Write `explicit_value` at each target, zero elsewhere.
    SetValues,
}

/// Rewrites one MLP neuron's post-nonlinearity activations over tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRule {
    pub layer: usize,
    pub neuron: usize,
    pub mode: EditMode,
    #[serde(default)]
    pub targets: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explicit_value: Option<f32>,
}

impl EditRule {
    pub fn move_max(layer: usize, neuron: usize, targets: Vec<usize>) -> Self {
        Self {
            layer,
            neuron,
            mode: EditMode::MoveMax,
            targets,
            explicit_value: None,
        }
    }

    pub fn zero(layer: usize, neuron: usize) -> Self {
        Self {
            layer,
            neuron,
            mode: EditMode::Zero,
            targets: Vec::new(),
            explicit_value: None,
        }
    }

    pub fn set_values(layer: usize, neuron: usize, targets: Vec<usize>, value: f32) -> Self {
        Self {
            layer,
            neuron,
            mode: EditMode::SetValues,
            targets,
            explicit_value: Some(value),
        }
    }
}

/// Checks ranges, required targets, and that no `(layer, neuron)` repeats.
pub fn validate_edits(edits: &[EditRule], config: &ModelConfig, seq_len: usize) -> Result<()> {
    let mut seen = BTreeSet::new();
    for e in edits {
        if e.layer >= config.n_layers {
            return Err(Error::Index {
                what: "edit layer",
                index: e.layer,
                len: config.n_layers,
            });
        }
        if e.neuron >= config.mlp_hidden {
            return Err(Error::Index {
                what: "edit neuron",
                index: e.neuron,
                len: config.mlp_hidden,
            });
        }
        if let Some(&t) = e.targets.iter().find(|&&t| t >= seq_len) {
            return Err(Error::Index {
                what: "edit target token",
                index: t,
                len: seq_len,
            });
        }
        match e.mode {
            EditMode::MoveMax | EditMode::SetValues if e.targets.is_empty() => {
                return Err(Error::Plan(format!(
                    "{:?} rule on ({}, {}) has no targets",
                    e.mode, e.layer, e.neuron
                )))
            }
            EditMode::SetValues if e.explicit_value.is_none() => {
                return Err(Error::Plan(format!(
                    "set_values rule on ({}, {}) has no value",
                    e.layer, e.neuron
                )))
            }
            _ => {}
        }
        if !seen.insert((e.layer, e.neuron)) {
            return Err(Error::Plan(format!(
                "two rules edit neuron ({}, {})",
                e.layer, e.neuron
            )));
        }
    }
    Ok(())
}

/// Applies every rule for one layer to its `[T × N]` hidden activations.
///
/// Each rule reads its own column before writing it; columns are distinct, so
/// rule order does not matter.
pub(crate) fn apply_edits<'a>(
    hidden: &mut Tensor,
    rules: impl Iterator<Item = &'a EditRule>,
    mut keep_original: impl FnMut(&EditRule, Vec<f32>),
) {
    let (t, n) = (hidden.rows(), hidden.cols());
    let data = hidden.data_mut();
    for rule in rules {
        let j = rule.neuron;
        let original: Vec<f32> = (0..t).map(|i| data[i * n + j]).collect();
        let peak = original.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        for i in 0..t {
            data[i * n + j] = 0.0;
        }
        match rule.mode {
            EditMode::Zero => {}
            EditMode::MoveMax => {
                for &i in &rule.targets {
                    data[i * n + j] = peak;
                }
            }
            EditMode::SetValues => {
                let v = rule.explicit_value.unwrap_or(0.0);
                for &i in &rule.targets {
                    data[i * n + j] = v;
                }
            }
        }
        keep_original(rule, original);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::ModelConfig;

    fn config() -> ModelConfig {
        let mut c = ModelConfig::openclip_vit_b16();
        c.n_layers = 2;
        c.mlp_hidden = 8;
        c
    }

    #[test]
    fn rejects_out_of_range_and_duplicates() {
        let c = config();
        assert!(matches!(
            validate_edits(&[EditRule::zero(2, 0)], &c, 10),
            Err(Error::Index { what: "edit layer", .. })
        ));
        assert!(matches!(
            validate_edits(&[EditRule::zero(0, 8)], &c, 10),
            Err(Error::Index { what: "edit neuron", .. })
        ));
        assert!(matches!(
            validate_edits(&[EditRule::move_max(0, 1, vec![10])], &c, 10),
            Err(Error::Index { .. })
        ));
        assert!(matches!(
            validate_edits(&[EditRule::move_max(0, 1, vec![])], &c, 10),
            Err(Error::Plan(_))
        ));
        assert!(matches!(
            validate_edits(&[EditRule::zero(1, 1), EditRule::move_max(1, 1, vec![0])], &c, 10),
            Err(Error::Plan(_))
        ));
        validate_edits(&[EditRule::zero(1, 1), EditRule::move_max(1, 2, vec![9])], &c, 10).unwrap();
    }

    #[test]
    fn modes() {
        let base = Tensor::from_rows(&[
            vec![1.0, 0.5, -1.0],
            vec![4.0, 0.2, 2.0],
            vec![-3.0, 0.1, 0.0],
        ])
        .unwrap();
        let rules = [
            EditRule::move_max(0, 0, vec![2]),
            EditRule::zero(0, 1),
            EditRule::set_values(0, 2, vec![0, 1], 7.0),
        ];
        let mut h = base.clone();
        let mut originals = Vec::new();
        apply_edits(&mut h, rules.iter(), |r, col| originals.push((r.neuron, col)));
        assert_eq!(h.column(0), vec![0.0, 0.0, 4.0]);
        assert_eq!(h.column(1), vec![0.0; 3]);
        assert_eq!(h.column(2), vec![7.0, 7.0, 0.0]);
        assert_eq!(originals[0], (0, vec![1.0, 4.0, -3.0]));

        // Order independence.
        let mut h2 = base.clone();
        apply_edits(&mut h2, rules.iter().rev(), |_, _| {});
        assert_eq!(h, h2);
    }
}
