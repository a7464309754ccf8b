// SPDX-License-Identifier: MIT OR Apache-2.0

//! Random-neuron controls for shift experiments.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::plan::{plan_shift, InterventionPlan, PlanMode};
use super::scan::NeuronId;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    /// Move each random neuron's own peak activation.
    OwnMax,
    /// Write the matched register neuron's peak into each random neuron.
    RegisterMax,
}

/// Draws, per layer, as many non-register neurons as `register_neurons` has
/// there, and builds the same shift onto `targets` for them.
pub fn random_neuron_control(
    seed: u64,
    register_neurons: &[NeuronId],
    mlp_hidden: usize,
    targets: &[usize],
    mode: ControlMode,
) -> Result<InterventionPlan> {
    let excluded: BTreeSet<NeuronId> = register_neurons.iter().copied().collect();
    let layers: BTreeSet<usize> = register_neurons.iter().map(|n| n.layer).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sources = Vec::new();
    let mut drawn = Vec::new();
    for l in layers {
        let at_layer: Vec<NeuronId> = register_neurons.iter().filter(|n| n.layer == l).copied().collect();
        let pool: Vec<usize> = (0..mlp_hidden)
            .filter(|&n| !excluded.contains(&NeuronId::new(l, n)))
            .collect();
        if pool.len() < at_layer.len() {
            return Err(Error::Plan(format!(
                "layer {l} has {} non-register neurons, need {}",
                pool.len(),
                at_layer.len()
            )));
        }
        for (src, i) in at_layer.iter().zip(sample(&mut rng, pool.len(), at_layer.len())) {
            drawn.push(NeuronId::new(l, pool[i]));
            sources.push(*src);
        }
    }
    let plan = plan_shift(&drawn, targets)?;
    Ok(match mode {
        ControlMode::OwnMax => plan,
        ControlMode::RegisterMax => InterventionPlan {
            neurons: drawn,
            mode: PlanMode::CopyMax {
                targets: targets.to_vec(),
                sources,
            },
            provenance: None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_is_seeded_and_disjoint() {
        let regs = [NeuronId::new(2, 1), NeuronId::new(2, 5), NeuronId::new(3, 0)];
        let a = random_neuron_control(4, &regs, 16, &[3], ControlMode::OwnMax).unwrap();
        let b = random_neuron_control(4, &regs, 16, &[3], ControlMode::OwnMax).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.neurons.len(), 3);
        assert!(a.neurons.iter().all(|n| !regs.contains(n)));
        let per_layer: Vec<usize> = a.neurons.iter().map(|n| n.layer).collect();
        assert_eq!(per_layer, vec![2, 2, 3]);

        let c = random_neuron_control(4, &regs, 16, &[3], ControlMode::RegisterMax).unwrap();
        match c.mode {
            PlanMode::CopyMax { sources, .. } => assert_eq!(sources, regs.to_vec()),
            _ => panic!("expected copy_max"),
        }
    }

    #[test]
    fn too_few_neurons() {
        let regs = [NeuronId::new(0, 0), NeuronId::new(0, 1)];
        assert!(random_neuron_control(0, &regs, 3, &[1], ControlMode::OwnMax).is_err());
    }
}
