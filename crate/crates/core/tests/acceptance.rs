// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion, then fails
//! if any criterion failed.
//!
//! The real-checkpoint tier reads `REGFORGE_CHECKPOINT` (OpenCLIP ViT-B/16 in
//! the container format), `REGFORGE_IMAGE_DIR` (at least 100 PPM or PNG
//! images) and optionally `REGFORGE_REMAP` (a parameter-name map), and skips
//! when either required variable is unset.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regforge::analysis::{
    activation_map, cls_attention_row, cosine, decompose_attention, find_outliers,
    max_patch_norm, patch_norms,
};
use regforge::io::{preprocess, Image};
use regforge::registers::{
    apply_plan, derive_attention_bias, find_register_neurons, plan_shift,
    plan_test_time_register, plan_zero_out, random_neuron_control, register_count_cosines,
    BiasScope, ControlMode, InterventionPlan, RegisterScanConfig,
};
use regforge::synthetic::{
    brute_force_register_scan, generate_planted_model, random_model, reference_forward,
    PlantSpec, PlantedModel,
};
use regforge::tensor::Tensor;
use regforge::vit::{
    attention_with_bias, project_keys_values, EditRule, FamilyDefaults, HeadBias, ModelConfig,
    NameRemap, RegisterInit, Site, TapSpec, TokenSequence, Vit,
};

enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Line {
    id: usize,
    name: &'static str,
    verdict: Verdict,
    detail: String,
}

impl Line {
    fn check(id: usize, name: &'static str, ok: bool, detail: String) -> Self {
        Self {
            id,
            name,
            verdict: if ok { Verdict::Pass } else { Verdict::Fail },
            detail,
        }
    }
}

fn max_rel_err(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).abs() / (1.0 + (y as f64).abs()))
        .fold(0.0, f64::max)
}

fn norm_rel_err(a: &[f32], b: &[f32]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    let den: f64 = b.iter().map(|&y| (y as f64).powi(2)).sum();
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

fn argmax(xs: &[f32]) -> usize {
    (0..xs.len()).max_by(|&a, &b| xs[a].total_cmp(&xs[b])).unwrap_or(0)
}

fn random_pixels(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let s = config.image_size;
    Tensor::new(
        vec![3, s, s],
        (0..3 * s * s).map(|_| rng.random_range(-2.0f32..2.0)).collect(),
    )
    .unwrap()
}

/// Fifty seeded planted models.
fn planted_models() -> Vec<(PlantedModel, Vit)> {
    (0..50)
        .map(|seed| {
            let pm = generate_planted_model(&PlantSpec::sample(seed)).unwrap();
            let vit = pm.vit().unwrap();
            (pm, vit)
        })
        .collect()
}

fn embedded(pm: &PlantedModel, vit: &Vit, count: usize, seed: u64) -> Vec<(Vec<usize>, TokenSequence)> {
    pm.images(count, seed)
        .into_iter()
        .map(|im| {
            let seq = pm.embed(vit, &im).unwrap();
            (im.truth.outliers, seq)
        })
        .collect()
}

fn kernel_parity() -> Line {
    let start = Instant::now();
    let mut worst = 0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..100 {
        let (config, store) = random_model(seed);
        let vit = Vit::new(config.clone(), &store).unwrap();
        let seq = vit.embed(&random_pixels(&config, &mut rng)).unwrap();
        let t = seq.len();
        let edits = vec![
            EditRule::move_max(rng.random_range(0..config.n_layers), rng.random_range(0..config.mlp_hidden), vec![rng.random_range(0..t)]),
            EditRule::zero(rng.random_range(0..config.n_layers), config.mlp_hidden - 1),
        ];
        let edits = if edits[0].layer == edits[1].layer && edits[0].neuron == edits[1].neuron {
            edits[..1].to_vec()
        } else {
            edits
        };
        for e in [&[][..], &edits[..]] {
            let fast = vit.forward(&seq, &TapSpec::none(), e).unwrap();
            let slow = reference_forward(&seq.tokens, &config, &store, e).unwrap();
            worst = worst.max(max_rel_err(fast.outputs.data(), slow.outputs.data()));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Line::check(
        1,
        "kernel parity",
        worst <= 1e-5 && secs < 30.0,
        format!("100 models with and without edits, max rel err {worst:.2e}, {secs:.1}s"),
    )
}

fn scan_recovery(models: &[(PlantedModel, Vit)]) -> Line {
    let start = Instant::now();
    let (mut exact, mut agree) = (0, 0);
    for (pm, vit) in models {
        let seqs: Vec<TokenSequence> = embedded(pm, vit, 8, 21).into_iter().map(|x| x.1).collect();
        let mut got = find_register_neurons(vit, &seqs, &pm.scan_config()).unwrap().neurons();
        got.sort();
        exact += usize::from(got == pm.truth.planted);
        let drops = brute_force_register_scan(vit, &seqs[..2], pm.truth.ignite_layer, pm.truth.analysis_layer).unwrap();
        let mut brute: Vec<_> = drops[..got.len()].iter().map(|d| d.id()).collect();
        brute.sort();
        agree += usize::from(brute == got);
    }
    let secs = start.elapsed().as_secs_f64();
    let n = models.len();
    Line::check(
        2,
        "planted scan recovery",
        exact >= 48 && agree * 100 >= 95 * n && secs < 120.0,
        format!("exact {exact}/{n}, brute-force agreement {agree}/{n}, {secs:.1}s"),
    )
}

/// Target is the argmax patch and every other patch is below threshold.
fn shifted_to(pm: &PlantedModel, vit: &Vit, seq: &TokenSequence, plan: &InterventionPlan, target: usize) -> bool {
    let layer = pm.truth.analysis_layer;
    let taps = TapSpec::none().with(layer, Site::PostMlpResidual);
    let run = apply_plan(vit, seq, plan, &taps, None).unwrap();
    let (top, _) = max_patch_norm(&run.output.trace, layer, Site::PostMlpResidual).unwrap();
    top == target
        && patch_norms(&run.output.trace, layer, Site::PostMlpResidual)
            .unwrap()
            .iter()
            .all(|&(p, v)| p == target || v < pm.truth.threshold)
}

fn shift_causality(models: &[(PlantedModel, Vit)]) -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut trials, mut shifted, mut own_fail, mut reg_fail) = (0, 0, 0, 0);
    for (pm, vit) in models {
        let planted = &pm.truth.planted;
        for (outliers, seq) in embedded(pm, vit, 10, 33) {
            let free: Vec<usize> = seq.patch_indices().into_iter().filter(|p| !outliers.contains(p)).collect();
            let target = free[rng.random_range(0..free.len())];
            trials += 1;
            shifted += usize::from(shifted_to(pm, vit, &seq, &plan_shift(planted, &[target]).unwrap(), target));
            let control_seed = rng.random();
            for (mode, fails) in [(ControlMode::OwnMax, &mut own_fail), (ControlMode::RegisterMax, &mut reg_fail)] {
                let plan = random_neuron_control(control_seed, planted, pm.config.mlp_hidden, &[target], mode).unwrap();
                *fails += usize::from(!shifted_to(pm, vit, &seq, &plan, target));
            }
        }
    }
    Line::check(
        3,
        "shift causality",
        shifted * 100 >= 99 * trials && own_fail * 100 >= 95 * trials && reg_fail * 100 >= 95 * trials,
        format!(
            "shift {shifted}/{trials}, control fails own-max {own_fail}/{trials}, register-max {reg_fail}/{trials}"
        ),
    )
}

fn register_absorption(models: &[(PlantedModel, Vit)]) -> Line {
    let (mut trials, mut absorbed, mut sink_trials, mut moved) = (0, 0, 0, 0);
    for (pm, vit) in models {
        let t = &pm.truth;
        let last = pm.config.n_layers - 1;
        let plan = plan_test_time_register(&t.planted, 1, RegisterInit::Zeros).unwrap();
        let attn = TapSpec::none().with(last, Site::AttentionWeights);
        let taps = attn.clone().with(t.analysis_layer, Site::PostMlpResidual);
        for (_, seq) in embedded(pm, vit, 4, 44) {
            let run = apply_plan(vit, &seq, &plan, &taps, None).unwrap();
            let reg = run.seq.register_indices()[0];
            let residual = run.output.trace.get(t.analysis_layer, Site::PostMlpResidual).unwrap();
            let reg_norm = residual.row(reg).iter().map(|v| v * v).sum::<f32>().sqrt();
            let empty = find_outliers(&run.output.trace, t.analysis_layer, t.threshold).unwrap().is_empty();
            trials += 1;
            absorbed += usize::from(empty && reg_norm >= t.threshold);
            if pm.spec.sink_strength > 0.0 {
                let before = vit.forward(&seq, &attn, &[]).unwrap().trace;
                let was = argmax(&cls_attention_row(&before, last).unwrap());
                let now = argmax(&cls_attention_row(&run.output.trace, last).unwrap());
                sink_trials += 1;
                moved += usize::from(seq.patch_indices().contains(&was) && now == reg);
            }
        }
    }
    Line::check(
        4,
        "register absorption",
        absorbed == trials && moved == sink_trials,
        format!("absorbed {absorbed}/{trials}, CLS argmax moved to register {moved}/{sink_trials}"),
    )
}

fn init_robustness(models: &[(PlantedModel, Vit)]) -> Line {
    let (mut trials, mut ok, mut worst) = (0, 0, 1f64);
    for (pm, vit) in models {
        let t = &pm.truth;
        let taps = TapSpec::none().with(t.analysis_layer, Site::PostMlpResidual);
        for (i, (_, seq)) in embedded(pm, vit, 4, 55).into_iter().enumerate() {
            let cls = seq.cls_index().unwrap();
            let runs: Vec<(Vec<usize>, Vec<f32>)> = [
                RegisterInit::Zeros,
                RegisterInit::GaussianMatched { seed: i as u64 },
                RegisterInit::PatchMean,
            ]
            .into_iter()
            .map(|init| {
                let plan = plan_test_time_register(&t.planted, 1, init).unwrap();
                let run = apply_plan(vit, &seq, &plan, &taps, None).unwrap();
                let out = find_outliers(&run.output.trace, t.analysis_layer, t.threshold).unwrap();
                (out.positions, run.output.outputs.row(cls).to_vec())
            })
            .collect();
            let mut same = true;
            let mut min_cos = 1f64;
            for a in 0..3 {
                for b in a + 1..3 {
                    same &= runs[a].0 == runs[b].0;
                    min_cos = min_cos.min(cosine(&runs[a].1, &runs[b].1));
                }
            }
            worst = worst.min(min_cos);
            trials += 1;
            ok += usize::from(same && min_cos >= 0.999);
        }
    }
    Line::check(
        5,
        "initialization robustness",
        ok == trials,
        format!("{ok}/{trials} images agree, min pairwise CLS cosine {worst:.5}"),
    )
}

fn count_stability(models: &[(PlantedModel, Vit)]) -> Line {
    let mut worst = 1f64;
    let mut cases = 0;
    for (pm, vit) in models {
        let last = pm.config.n_layers - 1;
        for (_, seq) in embedded(pm, vit, 2, 66) {
            for (_, c) in register_count_cosines(vit, &seq, &pm.truth.planted, &[2, 3, 4, 5], last).unwrap() {
                worst = worst.min(c);
                cases += 1;
            }
        }
    }
    Line::check(
        6,
        "register-count stability",
        worst >= 0.98,
        format!("{cases} runs with k = 2..5, min cosine to 1 register {worst:.5}"),
    )
}

fn decomposition_identity() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0f64;
    for trial in 0..1000u64 {
        let (config, store) = random_model(trial);
        let vit = Vit::new(config.clone(), &store).unwrap();
        let mut seq = vit.embed(&random_pixels(&config, &mut rng)).unwrap();
        let regs = rng.random_range(0..4);
        seq = regforge::vit::append_registers(&seq, regs, RegisterInit::PatchMean).unwrap();
        let l = rng.random_range(0..config.n_layers);
        let taps = TapSpec::none()
            .with(l, Site::AttentionWeights)
            .with(l, Site::AttentionValues);
        let mut taps = taps;
        if l > 0 {
            taps.insert(l - 1, Site::PostMlpResidual);
        }
        let trace = vit.forward(&seq, &taps, &[]).unwrap().trace;
        let input = if l == 0 { seq.tokens.clone() } else { trace.get(l - 1, Site::PostMlpResidual).unwrap().clone() };
        let layer = vit.layer(l);
        let parts = attention_with_bias(&vit.norm(&input, &layer.norm1).unwrap(), layer, config.n_heads, None).unwrap();
        // Any subset works as the "register" side of the partition.
        let subset: Vec<usize> = (0..seq.len()).filter(|_| rng.random_bool(0.3)).collect();
        let rep = decompose_attention(&trace, l, &subset).unwrap();
        worst = worst.max(max_rel_err(rep.total().data(), parts.mixed.data()));
    }
    Line::check(
        7,
        "decomposition identity",
        worst <= 1e-5,
        format!("1000 random partitions, max rel err {worst:.2e}"),
    )
}

/// A bias column carrying `(k, v)` equals a physically appended row with those
/// keys and values.
fn append_token_error(rng: &mut ChaCha8Rng) -> f64 {
    let (config, store) = random_model(rng.random());
    let vit = Vit::new(config.clone(), &store).unwrap();
    let seq = vit.embed(&random_pixels(&config, rng)).unwrap();
    let l = rng.random_range(0..config.n_layers);
    let layer = vit.layer(l);
    let d = config.embed_dim;
    let extra: Vec<f32> = (0..d).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    let mut rows = seq.tokens.data().to_vec();
    rows.extend(&extra);
    let t = seq.len();
    let x = Tensor::new(vec![t + 1, d], rows).unwrap();
    let full = attention_with_bias(&x, layer, config.n_heads, None).unwrap();
    let (k, v) = project_keys_values(&Tensor::new(vec![1, d], extra).unwrap(), layer, config.n_heads).unwrap();
    let bias: Vec<HeadBias> = (0..config.n_heads)
        .map(|h| HeadBias {
            key: k.data()[h * k.shape()[2]..(h + 1) * k.shape()[2]].to_vec(),
            value: v.data()[h * v.shape()[2]..(h + 1) * v.shape()[2]].to_vec(),
        })
        .collect();
    let biased = attention_with_bias(&seq.tokens, layer, config.n_heads, Some(&bias)).unwrap();
    max_rel_err(biased.output.data(), &full.output.data()[..t * d])
}

fn bias_equivalence(models: &[(PlantedModel, Vit)]) -> Line {
    let (mut trials, mut ok, mut worst) = (0, 0, 0f64);
    for (pm, vit) in models {
        let t = &pm.truth;
        let zero = plan_zero_out(&t.planted).unwrap();
        let reg = plan_test_time_register(&t.planted, 1, RegisterInit::Zeros).unwrap();
        let all = TapSpec::sites(pm.config.n_layers, &[Site::PostMlpResidual]);
        for (_, seq) in embedded(pm, vit, 2, 77) {
            let bias = derive_attention_bias(vit, std::slice::from_ref(&seq), &t.planted, BiasScope::AllLayers).unwrap();
            let with_bias = apply_plan(vit, &seq, &zero, &all, Some(&bias)).unwrap();
            let with_reg = apply_plan(vit, &seq, &reg, &TapSpec::none(), None).unwrap();
            let cls = seq.cls_index().unwrap();
            let err = norm_rel_err(with_bias.output.outputs.row(cls), with_reg.output.outputs.row(cls));
            let clean = (0..pm.config.n_layers)
                .all(|l| find_outliers(&with_bias.output.trace, l, t.threshold).unwrap().is_empty());
            worst = worst.max(err);
            trials += 1;
            ok += usize::from(err <= 1e-3 && clean);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let append = (0..200).map(|_| append_token_error(&mut rng)).fold(0f64, f64::max);
    Line::check(
        8,
        "attention-bias equivalence",
        ok == trials && append <= 1e-5,
        format!("{ok}/{trials} planted runs (max CLS rel err {worst:.2e}), append-token identity max err {append:.2e}"),
    )
}

fn image_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).collect())
        .unwrap_or_default();
    files.retain(|p| {
        matches!(
            p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
            Some("ppm" | "png")
        )
    });
    files.sort();
    files
}

fn real_checkpoint() -> Line {
    let skip = |why: &str| Line {
        id: 9,
        name: "real checkpoint",
        verdict: Verdict::Skip,
        detail: why.to_string(),
    };
    let (Some(ckpt), Some(dir)) = (std::env::var_os("REGFORGE_CHECKPOINT"), std::env::var_os("REGFORGE_IMAGE_DIR")) else {
        return skip("REGFORGE_CHECKPOINT or REGFORGE_IMAGE_DIR not set");
    };
    let files = image_files(Path::new(&dir));
    if files.len() < 100 {
        return skip(&format!("need 100 images, found {}", files.len()));
    }
    let remap = std::env::var_os("REGFORGE_REMAP").map(|p| NameRemap::from_json_file(Path::new(&p)).unwrap());
    let config = ModelConfig::openclip_vit_b16();
    let vit = match Vit::load(Path::new(&ckpt), config.clone(), remap.as_ref()) {
        Ok(v) => v,
        Err(e) => return Line::check(9, "real checkpoint", false, format!("load failed: {e}")),
    };
    let defaults = FamilyDefaults::openclip_vit_b16();
    let scan = RegisterScanConfig {
        top_layer: defaults.top_layer,
        top_k: defaults.top_k,
        outlier_threshold: defaults.outlier_threshold,
        outlier_measure_layer: defaults.outlier_measure_layer,
        images: 0,
    };
    let seqs: Vec<TokenSequence> = files[..100]
        .iter()
        .map(|p| vit.embed(&preprocess(&Image::open(p).unwrap(), &config).unwrap()).unwrap())
        .collect();
    // The ignite MLP is the sixth block, index top_layer.
    let ignite = defaults.top_layer;
    let (mut before_sum, mut after_sum) = (0f64, 0f64);
    let profile_taps = TapSpec::none()
        .with(ignite - 1, Site::PostMlpResidual)
        .with(ignite, Site::PostMlpResidual);
    for seq in &seqs {
        let trace = vit.forward(seq, &profile_taps, &[]).unwrap().trace;
        before_sum += max_patch_norm(&trace, ignite - 1, Site::PostMlpResidual).unwrap().1 as f64;
        after_sum += max_patch_norm(&trace, ignite, Site::PostMlpResidual).unwrap().1 as f64;
    }
    let jump = after_sum / before_sum.max(f64::MIN_POSITIVE);
    let result = find_register_neurons(&vit, &seqs, &scan).unwrap();
    let top = result.neurons();
    let mut taps = scan.taps();
    for n in &top {
        taps.insert(n.layer, Site::MlpHiddenActivation);
    }
    let (mut pairs, mut hits) = (0, 0);
    for seq in &seqs {
        let trace = vit.forward(seq, &taps, &[]).unwrap().trace;
        let out = find_outliers(&trace, scan.outlier_measure_layer, scan.outlier_threshold).unwrap();
        if out.is_empty() {
            continue;
        }
        let patches = seq.patch_indices();
        for n in &top {
            let map = activation_map(&trace, n.layer, n.neuron).unwrap();
            pairs += 1;
            hits += usize::from(out.positions.contains(&patches[argmax(map.data())]));
        }
    }
    let plan = plan_test_time_register(&top, 1, RegisterInit::Zeros).unwrap();
    let mtaps = TapSpec::none().with(scan.outlier_measure_layer, Site::PostMlpResidual);
    let emptied = seqs
        .iter()
        .filter(|seq| {
            let run = apply_plan(&vit, seq, &plan, &mtaps, None).unwrap();
            find_outliers(&run.output.trace, scan.outlier_measure_layer, scan.outlier_threshold)
                .unwrap()
                .is_empty()
        })
        .count();
    let agreement = hits as f64 / pairs.max(1) as f64;
    Line::check(
        9,
        "real checkpoint",
        jump > 3.0 && agreement >= 0.9 && emptied >= 95,
        format!("mean max patch norm ratio {jump:.2}, activation-map agreement {agreement:.3}, register emptied {emptied}/100"),
    )
}

/// Runs without the libtest harness so the verdict lines always reach stdout.
fn main() {
    let models = planted_models();
    let lines = vec![
        kernel_parity(),
        scan_recovery(&models),
        shift_causality(&models),
        register_absorption(&models),
        init_robustness(&models),
        count_stability(&models),
        decomposition_identity(),
        bias_equivalence(&models),
        real_checkpoint(),
    ];
    let mut failed = Vec::new();
    for l in &lines {
        let tag = match l.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                failed.push(l.id);
                "FAIL"
            }
            Verdict::Skip => "SKIP",
        };
        println!("criterion {} {}: {tag} ({})", l.id, l.name, l.detail);
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
