// SPDX-License-Identifier: MIT OR Apache-2.0

//! Register-neuron discovery and the interventions built on it.

pub mod bias;
pub mod control;
pub mod plan;
pub mod scan;

pub use crate::vit::AttentionBias;
pub use bias::{derive_attention_bias, BiasScope};
pub use control::{random_neuron_control, ControlMode};
pub use plan::{
    apply_plan, peak_activation, plan_shift, plan_test_time_register, plan_zero_out,
    register_count_cosines, InterventionPlan, PlanMode, PlanRun,
};
pub use scan::{
    find_register_neurons, scan_traces, NeuronId, RankedNeuron, RegisterScanConfig,
    RegisterScanResult,
};
