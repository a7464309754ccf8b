// SPDX-License-Identifier: MIT OR Apache-2.0

//! Discovery and interventions against planted ground truth.

use regforge::analysis::{cls_attention_row, find_outliers, max_patch_norm, patch_norms};
use regforge::registers::{
    apply_plan, derive_attention_bias, find_register_neurons, plan_shift,
    plan_test_time_register, plan_zero_out, random_neuron_control, BiasScope, ControlMode,
};
use regforge::synthetic::{
    brute_force_register_scan, generate_planted_model, PlantSpec, PlantedModel, Trigger,
};
use regforge::vit::{RegisterInit, Site, TapSpec, TokenSequence, Vit};
use regforge::Error;

fn planted(seed: u64) -> (PlantedModel, Vit) {
    let pm = generate_planted_model(&PlantSpec::sample(seed)).unwrap();
    let vit = pm.vit().unwrap();
    (pm, vit)
}

fn analysis_taps(pm: &PlantedModel) -> TapSpec {
    TapSpec::none().with(pm.truth.analysis_layer, Site::PostMlpResidual)
}

fn seqs(pm: &PlantedModel, vit: &Vit, count: usize, seed: u64) -> Vec<TokenSequence> {
    pm.images(count, seed)
        .iter()
        .map(|im| pm.embed(vit, im).unwrap())
        .collect()
}

#[test]
fn generation_is_deterministic() {
    let spec = PlantSpec::sample(11);
    let a = generate_planted_model(&spec).unwrap();
    let b = generate_planted_model(&spec).unwrap();
    assert_eq!(a.truth, b.truth);
    assert!(a.store.iter().zip(b.store.iter()).all(|(x, y)| x == y));
    let json = serde_json::to_string(&spec).unwrap();
    assert_eq!(serde_json::from_str::<PlantSpec>(&json).unwrap(), spec);
}

#[test]
fn ground_truth_matches_runtime_outliers() {
    for seed in 0..6 {
        let (pm, vit) = planted(seed);
        for im in pm.images(6, 99) {
            let seq = pm.embed(&vit, &im).unwrap();
            let trace = vit.forward(&seq, &analysis_taps(&pm), &[]).unwrap().trace;
            let found = find_outliers(&trace, pm.truth.analysis_layer, pm.truth.threshold).unwrap();
            let mut got = found.positions.clone();
            got.sort_unstable();
            assert_eq!(got, im.truth.outliers, "seed {seed}");
            assert!(!got.is_empty(), "every generated image triggers");
        }
    }
}

#[test]
fn fixed_trigger_is_the_argmax_patch() {
    let spec = PlantSpec::sample(4).with_trigger(Trigger::FixedPosition { row: 2, col: 1 });
    let pm = generate_planted_model(&spec).unwrap();
    let vit = pm.vit().unwrap();
    let want = regforge::vit::patch_token(&pm.config, 2, 1);
    for seq in seqs(&pm, &vit, 5, 3) {
        let trace = vit.forward(&seq, &analysis_taps(&pm), &[]).unwrap().trace;
        let (top, _) = max_patch_norm(&trace, pm.truth.analysis_layer, Site::PostMlpResidual).unwrap();
        assert_eq!(top, want);
    }
}

#[test]
fn zero_gain_plants_nothing() {
    let mut spec = PlantSpec::sample(5);
    spec.outlier_gain = 0.0;
    let pm = generate_planted_model(&spec).unwrap();
    assert!(!pm.truth.has_outliers());
    let vit = pm.vit().unwrap();
    for (im, seq) in pm.images(4, 1).iter().zip(seqs(&pm, &vit, 4, 1)) {
        assert!(im.truth.outliers.is_empty());
        let trace = vit.forward(&seq, &analysis_taps(&pm), &[]).unwrap().trace;
        assert!(find_outliers(&trace, pm.truth.analysis_layer, pm.truth.threshold)
            .unwrap()
            .is_empty());
    }
}

#[test]
fn infeasible_specs_are_rejected() {
    let mut spec = PlantSpec::sample(2).with_trigger(Trigger::UniformPatch);
    spec.ignite_layer = 0;
    spec.planted.iter_mut().for_each(|n| n.layer = 0);
    assert!(matches!(generate_planted_model(&spec), Err(Error::Spec(_))));

    let mut spec = PlantSpec::sample(2);
    spec.ignite_layer = spec.n_layers - 1;
    spec.planted.iter_mut().for_each(|n| n.layer = spec.ignite_layer);
    assert!(matches!(generate_planted_model(&spec), Err(Error::Spec(_))));
}

#[test]
fn outlier_is_the_last_layer_cls_sink() {
    let (pm, vit) = planted(7);
    let last = pm.config.n_layers - 1;
    for (im, seq) in pm.images(4, 2).iter().zip(seqs(&pm, &vit, 4, 2)) {
        let taps = TapSpec::none().with(last, Site::AttentionWeights);
        let trace = vit.forward(&seq, &taps, &[]).unwrap().trace;
        let row = cls_attention_row(&trace, last).unwrap();
        let top = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert!(im.truth.outliers.contains(&top));
    }
}

#[test]
fn scan_and_brute_force_find_the_planted_neurons() {
    for seed in [0, 3] {
        let (pm, vit) = planted(seed);
        let images = seqs(&pm, &vit, 8, 5);
        let result = find_register_neurons(&vit, &images, &pm.scan_config()).unwrap();
        let mut got = result.neurons();
        got.sort();
        assert_eq!(got, pm.truth.planted);

        let k = pm.truth.planted.len();
        let drops = brute_force_register_scan(
            &vit,
            &images[..2],
            pm.truth.ignite_layer,
            pm.truth.analysis_layer,
        )
        .unwrap();
        let mut top: Vec<_> = drops[..k].iter().map(|d| d.id()).collect();
        top.sort();
        assert_eq!(top, pm.truth.planted);
        assert!(drops[k - 1].drop > 10.0 * drops[k].drop.max(1e-3));
    }
}

#[test]
fn shift_moves_outliers_to_targets() {
    let (pm, vit) = planted(9);
    let t = &pm.truth;
    for (im, seq) in pm.images(5, 8).iter().zip(seqs(&pm, &vit, 5, 8)) {
        let free: Vec<usize> = seq
            .patch_indices()
            .into_iter()
            .filter(|p| !im.truth.outliers.contains(p))
            .collect();
        for targets in [vec![free[0]], vec![free[1], free[free.len() - 1]]] {
            let plan = plan_shift(&t.planted, &targets).unwrap();
            let run = apply_plan(&vit, &seq, &plan, &analysis_taps(&pm), None).unwrap();
            let out = find_outliers(&run.output.trace, t.analysis_layer, t.threshold).unwrap();
            let mut got = out.positions.clone();
            got.sort_unstable();
            let mut want = targets.clone();
            want.sort_unstable();
            assert_eq!(got, want);
        }
    }
}

#[test]
fn random_neuron_controls_do_not_shift() {
    let (pm, vit) = planted(9);
    let t = &pm.truth;
    for (i, (im, seq)) in pm.images(5, 8).iter().zip(seqs(&pm, &vit, 5, 8)).enumerate() {
        let target = *seq
            .patch_indices()
            .iter()
            .find(|p| !im.truth.outliers.contains(p))
            .unwrap();
        for mode in [ControlMode::OwnMax, ControlMode::RegisterMax] {
            let plan = random_neuron_control(i as u64, &t.planted, pm.config.mlp_hidden, &[target], mode).unwrap();
            assert!(plan.neurons.iter().all(|n| !t.planted.contains(n)));
            let run = apply_plan(&vit, &seq, &plan, &analysis_taps(&pm), None).unwrap();
            let norms = patch_norms(&run.output.trace, t.analysis_layer, Site::PostMlpResidual).unwrap();
            let at_target = norms.iter().find(|(p, _)| *p == target).unwrap().1;
            assert!(at_target < t.threshold);
        }
    }
}

#[test]
fn zero_out_removes_outliers() {
    let (pm, vit) = planted(1);
    let plan = plan_zero_out(&pm.truth.planted).unwrap();
    for seq in seqs(&pm, &vit, 5, 4) {
        let run = apply_plan(&vit, &seq, &plan, &analysis_taps(&pm), None).unwrap();
        assert!(find_outliers(&run.output.trace, pm.truth.analysis_layer, pm.truth.threshold)
            .unwrap()
            .is_empty());
    }
}

#[test]
fn test_time_register_absorbs_outliers() {
    let (pm, vit) = planted(13);
    let t = &pm.truth;
    let last = pm.config.n_layers - 1;
    let taps = analysis_taps(&pm).with(last, Site::AttentionWeights);
    for init in [RegisterInit::Zeros, RegisterInit::PatchMean, RegisterInit::GaussianMatched { seed: 1 }] {
        let plan = plan_test_time_register(&t.planted, 1, init).unwrap();
        for seq in seqs(&pm, &vit, 4, 6) {
            let run = apply_plan(&vit, &seq, &plan, &taps, None).unwrap();
            assert!(find_outliers(&run.output.trace, t.analysis_layer, t.threshold).unwrap().is_empty());
            let reg = run.seq.register_indices()[0];
            let r: f32 = run.output.trace.get(t.analysis_layer, Site::PostMlpResidual).unwrap()
                .row(reg).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!(r >= t.threshold);
            let row = cls_attention_row(&run.output.trace, last).unwrap();
            let top = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(top, reg);
        }
    }
}

#[test]
fn attention_bias_replays_one_register() {
    let (pm, vit) = planted(6);
    let t = &pm.truth;
    let zero = plan_zero_out(&t.planted).unwrap();
    let reg = plan_test_time_register(&t.planted, 1, RegisterInit::Zeros).unwrap();
    let all = TapSpec::sites(pm.config.n_layers, &[Site::PostMlpResidual]);
    for seq in seqs(&pm, &vit, 3, 2) {
        let bias = derive_attention_bias(&vit, std::slice::from_ref(&seq), &t.planted, BiasScope::AllLayers).unwrap();
        assert_eq!(bias.layers.len(), pm.config.n_layers);
        let with_bias = apply_plan(&vit, &seq, &zero, &all, Some(&bias)).unwrap();
        let with_reg = apply_plan(&vit, &seq, &reg, &TapSpec::none(), None).unwrap();
        let cls = seq.cls_index().unwrap();
        let (a, b) = (with_bias.output.outputs.row(cls), with_reg.output.outputs.row(cls));
        let err: f32 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f32>().sqrt();
        let scale: f32 = b.iter().map(|y| y * y).sum::<f32>().sqrt();
        assert!(err <= 1e-3 * scale, "relative error {}", err / scale);
        for l in 0..pm.config.n_layers {
            assert!(find_outliers(&with_bias.output.trace, l, t.threshold).unwrap().is_empty());
        }
    }
    let narrow = derive_attention_bias(&vit, &seqs(&pm, &vit, 2, 2), &t.planted, BiasScope::FromFirstIntervention).unwrap();
    assert_eq!(narrow.layers.keys().next().copied(), Some(t.ignite_layer));
    assert!(matches!(
        derive_attention_bias(&vit, &[], &t.planted, BiasScope::AllLayers),
        Err(Error::EmptyInput(_))
    ));
}
