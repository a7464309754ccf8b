// SPDX-License-Identifier: MIT OR Apache-2.0

//! Interventions on register neurons, compiled to [`EditRule`]s.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::scan::{NeuronId, RegisterScanConfig};
use crate::analysis::{decompose_attention, mean_row_cosine};
use crate::vit::{
    append_registers, ActivationTrace, AttentionBias, EditRule, ForwardOutput, RegisterInit,
    RunOptions, Site, TapSpec, TokenSequence, Vit,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    /// Move each neuron's peak activation onto `targets`, zero elsewhere.
    ShiftToPositions { targets: Vec<usize> },
    /// Append `count` registers and move peaks there, neurons dealt
    /// round-robin across registers in plan order.
    TestTimeRegister { count: usize, init: RegisterInit },
    /// Zero every neuron's column.
    ZeroOut,
    /// Write `sources[i]`'s peak activation into `neurons[i]` at `targets`,
    /// zero elsewhere. Needs an unedited baseline run to resolve the values.
    CopyMax {
        targets: Vec<usize>,
        sources: Vec<NeuronId>,
    },
}

/// Neurons plus what to do with them. Pure data; replayable from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionPlan {
    pub neurons: Vec<NeuronId>,
    pub mode: PlanMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<RegisterScanConfig>,
}

fn check_unique(neurons: &[NeuronId]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for n in neurons {
        if !seen.insert(*n) {
            return Err(Error::Plan(format!(
                "neuron ({}, {}) listed twice",
                n.layer, n.neuron
            )));
        }
    }
    Ok(())
}

pub fn plan_shift(neurons: &[NeuronId], targets: &[usize]) -> Result<InterventionPlan> {
    check_unique(neurons)?;
    if targets.is_empty() {
        return Err(Error::Plan("shift needs at least one target".into()));
    }
    Ok(InterventionPlan {
        neurons: neurons.to_vec(),
        mode: PlanMode::ShiftToPositions {
            targets: targets.to_vec(),
        },
        provenance: None,
    })
}

pub fn plan_test_time_register(
    neurons: &[NeuronId],
    count: usize,
    init: RegisterInit,
) -> Result<InterventionPlan> {
    check_unique(neurons)?;
    if count == 0 {
        return Err(Error::Plan("test-time register count must be at least 1".into()));
    }
    Ok(InterventionPlan {
        neurons: neurons.to_vec(),
        mode: PlanMode::TestTimeRegister { count, init },
        provenance: None,
    })
}

pub fn plan_zero_out(neurons: &[NeuronId]) -> Result<InterventionPlan> {
    check_unique(neurons)?;
    Ok(InterventionPlan {
        neurons: neurons.to_vec(),
        mode: PlanMode::ZeroOut,
        provenance: None,
    })
}

/// Peak of `neuron`'s column over all tokens in `trace`.
pub fn peak_activation(trace: &ActivationTrace, neuron: NeuronId) -> Result<f32> {
    let h = trace.get(neuron.layer, Site::MlpHiddenActivation)?;
    Ok(h.column(neuron.neuron)
        .into_iter()
        .fold(f32::NEG_INFINITY, f32::max))
}

impl InterventionPlan {
    pub fn with_provenance(mut self, scan: RegisterScanConfig) -> Self {
        self.provenance = Some(scan);
        self
    }

    /// Registers this plan appends.
    pub fn register_count(&self) -> usize {
        match self.mode {
            PlanMode::TestTimeRegister { count, .. } => count,
            _ => 0,
        }
    }

    /// Appends the plan's registers (if any) to an embedded sequence.
    pub fn prepare(&self, seq: &TokenSequence) -> Result<TokenSequence> {
        match self.mode {
            PlanMode::TestTimeRegister { count, init } => append_registers(seq, count, init),
            _ => Ok(seq.clone()),
        }
    }

    /// Does compiling need an unedited baseline trace?
    pub fn needs_baseline(&self) -> bool {
        matches!(self.mode, PlanMode::CopyMax { .. })
    }

    /// Edit rules for a sequence that had `base_len` tokens before
    /// [`prepare`](Self::prepare).
    pub fn compile(
        &self,
        base_len: usize,
        baseline: Option<&ActivationTrace>,
    ) -> Result<Vec<EditRule>> {
        check_unique(&self.neurons)?;
        let rules = match &self.mode {
            PlanMode::ShiftToPositions { targets } => self
                .neurons
                .iter()
                .map(|n| EditRule::move_max(n.layer, n.neuron, targets.clone()))
                .collect(),
            PlanMode::TestTimeRegister { count, .. } => self
                .neurons
                .iter()
                .enumerate()
                .map(|(i, n)| EditRule::move_max(n.layer, n.neuron, vec![base_len + i % count]))
                .collect(),
            PlanMode::ZeroOut => self
                .neurons
                .iter()
                .map(|n| EditRule::zero(n.layer, n.neuron))
                .collect(),
            PlanMode::CopyMax { targets, sources } => {
                if sources.len() != self.neurons.len() {
                    return Err(Error::Plan(format!(
                        "{} neurons but {} value sources",
                        self.neurons.len(),
                        sources.len()
                    )));
                }
                let baseline = baseline
                    .ok_or_else(|| Error::Plan("copy_max needs a baseline trace".into()))?;
                self.neurons
                    .iter()
                    .zip(sources)
                    .map(|(n, s)| {
                        Ok(EditRule::set_values(
                            n.layer,
                            n.neuron,
                            targets.clone(),
                            peak_activation(baseline, *s)?,
                        ))
                    })
                    .collect::<Result<_>>()?
            }
        };
        Ok(rules)
    }

    /// Taps an unedited run needs so [`compile`](Self::compile) can resolve values.
    pub fn baseline_taps(&self) -> TapSpec {
        let mut t = TapSpec::none();
        if let PlanMode::CopyMax { sources, .. } = &self.mode {
            for s in sources {
                t.insert(s.layer, Site::MlpHiddenActivation);
            }
        }
        t
    }
}

/// A plan executed on one image.
#[derive(Debug, Clone)]
pub struct PlanRun {
    /// The sequence actually run, registers included.
    pub seq: TokenSequence,
    pub edits: Vec<EditRule>,
    pub output: ForwardOutput,
}

/// Prepares, compiles and runs `plan` on `seq`.
pub fn apply_plan(
    model: &Vit,
    seq: &TokenSequence,
    plan: &InterventionPlan,
    taps: &TapSpec,
    bias: Option<&AttentionBias>,
) -> Result<PlanRun> {
    let baseline = if plan.needs_baseline() {
        Some(model.forward(seq, &plan.baseline_taps(), &[])?.trace)
    } else {
        None
    };
    let prepared = plan.prepare(seq)?;
    let edits = plan.compile(seq.len(), baseline.as_ref())?;
    let output = model.forward_with(
        &prepared,
        RunOptions {
            taps,
            edits: &edits,
            bias,
        },
    )?;
    Ok(PlanRun {
        seq: prepared,
        edits,
        output,
    })
}

/// Mean cosine, over the original tokens, between the registers' attention
/// contribution at `layer` with one register and with each count in `counts`.
pub fn register_count_cosines(
    model: &Vit,
    seq: &TokenSequence,
    neurons: &[NeuronId],
    counts: &[usize],
    layer: usize,
) -> Result<Vec<(usize, f64)>> {
    let taps = TapSpec::none()
        .with(layer, Site::AttentionWeights)
        .with(layer, Site::AttentionValues);
    let update = |k: usize| -> Result<crate::tensor::Tensor> {
        let plan = plan_test_time_register(neurons, k, RegisterInit::Zeros)?;
        let run = apply_plan(model, seq, &plan, &taps, None)?;
        let regs = run.seq.register_indices();
        Ok(decompose_attention(&run.output.trace, layer, &regs)?.registers)
    };
    let reference = update(1)?;
    let tokens: Vec<usize> = (0..seq.len()).collect();
    counts
        .iter()
        .map(|&k| Ok((k, mean_row_cosine(&reference, &update(k)?, &tokens))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compile_modes() {
        let ns = [NeuronId::new(1, 4), NeuronId::new(1, 9), NeuronId::new(2, 0)];
        let p = plan_shift(&ns, &[3, 5]).unwrap();
        let r = p.compile(10, None).unwrap();
        assert_eq!(r.len(), 3);
        assert!(r.iter().all(|e| e.targets == vec![3, 5]));
        assert_eq!(p.compile(10, None).unwrap(), r);

        let p = plan_test_time_register(&ns, 2, RegisterInit::Zeros).unwrap();
        let r = p.compile(10, None).unwrap();
        let targets: Vec<_> = r.iter().map(|e| e.targets[0]).collect();
        assert_eq!(targets, vec![10, 11, 10]);

        let r = plan_zero_out(&ns).unwrap().compile(10, None).unwrap();
        assert!(r.iter().all(|e| e.mode == crate::vit::EditMode::Zero));
    }

    #[test]
    fn plan_errors() {
        let n = NeuronId::new(0, 1);
        assert!(matches!(plan_shift(&[n, n], &[1]), Err(Error::Plan(_))));
        assert!(matches!(plan_shift(&[n], &[]), Err(Error::Plan(_))));
        assert!(matches!(
            plan_test_time_register(&[n], 0, RegisterInit::Zeros),
            Err(Error::Plan(_))
        ));
        let p = InterventionPlan {
            neurons: vec![n],
            mode: PlanMode::CopyMax {
                targets: vec![2],
                sources: vec![NeuronId::new(0, 3)],
            },
            provenance: None,
        };
        assert!(matches!(p.compile(5, None), Err(Error::Plan(_))));
    }

    #[test]
    fn plan_json_round_trip() {
        let p = plan_test_time_register(
            &[NeuronId::new(3, 7)],
            1,
            RegisterInit::GaussianMatched { seed: 9 },
        )
        .unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<InterventionPlan>(&s).unwrap(), p);
    }
}
