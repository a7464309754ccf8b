// SPDX-License-Identifier: MIT OR Apache-2.0

//! Analysis and intervention subcommands.

use std::path::{Path, PathBuf};

use anyhow::Result;
use regforge::analysis::{
    cls_attention_map, cls_attention_row, cosine, decompose_attention, find_outliers,
    max_patch_norm, norm_profile, patch_norm_map, DecompositionReport, NormProfile, OutlierSet,
};
use regforge::io::HeatScale;
use regforge::registers::{
    apply_plan, derive_attention_bias, find_register_neurons, plan_shift,
    plan_test_time_register, plan_zero_out, register_count_cosines, AttentionBias, BiasScope,
    InterventionPlan, NeuronId, PlanMode, RegisterScanConfig,
};
use regforge::tensor;
use regforge::vit::{ActivationTrace, RegisterInit, Site, TapSpec};
use regforge::Tensor;
use serde::Serialize;

use crate::context::{
    expand_images, image_label, load_model, per_image, read_input, resolve_measure,
    resolve_neurons, Run, TargetArg, Usage,
};
use crate::{InitArg, MeasureArgs, ModelArgs, NeuronArgs};

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn row_norm(trace: &ActivationTrace, layer: usize, token: usize) -> Result<f32> {
    let row = trace.get(layer, Site::PostMlpResidual)?.row(token);
    Ok(row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt() as f32)
}

/// Max patch norm after each block, from a trace with every post-MLP tap.
fn max_norms(trace: &ActivationTrace, layers: usize) -> Result<Vec<f32>> {
    (0..layers)
        .map(|l| Ok(max_patch_norm(trace, l, Site::PostMlpResidual)?.1))
        .collect()
}

fn mean_profile(profiles: &[NormProfile]) -> NormProfile {
    let n = profiles.len() as f64;
    let avg = |pick: fn(&NormProfile) -> &Vec<f32>| -> Vec<f32> {
        let len = pick(&profiles[0]).len();
        (0..len)
            .map(|l| (profiles.iter().map(|p| pick(p)[l] as f64).sum::<f64>() / n) as f32)
            .collect()
    };
    NormProfile {
        post_attention: avg(|p| &p.post_attention),
        post_mlp: avg(|p| &p.post_mlp),
        cls_attention: avg(|p| &p.cls_attention),
        images: profiles.len(),
        include_cls: profiles[0].include_cls,
    }
}

#[derive(Serialize)]
struct ImageProfile {
    image: String,
    profile: NormProfile,
}

#[derive(Serialize)]
struct TraceNormsResult {
    /// Per-image layer maxima averaged over the image set.
    mean: NormProfile,
    images: Vec<ImageProfile>,
}

pub fn trace_norms(run: &Run, images: &[PathBuf], model: &ModelArgs, include_cls: bool) -> Result<()> {
    let m = load_model(model)?;
    let paths = expand_images(images)?;
    let c = m.config();
    let mut sites = vec![Site::PostAttentionResidual, Site::PostMlpResidual];
    if c.has_cls {
        sites.push(Site::AttentionWeights);
    }
    let taps = TapSpec::sites(c.n_layers, &sites);
    let manifest = m.manifest(run, "trace-norms", &paths, &taps)?;
    let results = per_image(&paths, |i, path| {
        let seq = m.embed_path(path)?;
        let trace = m.vit.forward(&seq, &taps, &[])?.trace;
        let profile = norm_profile(std::slice::from_ref(&trace), include_cls)?;
        let label = image_label(i, path);
        for l in 0..c.n_layers {
            let grid = patch_norm_map(&trace, l, Site::PostMlpResidual)?;
            run.write_heatmap(&format!("heatmaps/{label}/norm_layer{l:02}.pgm"), &grid, HeatScale::Log, c.image_size)?;
        }
        Ok(ImageProfile {
            image: display(path),
            profile,
        })
    })?;
    let profiles: Vec<NormProfile> = results.iter().map(|r| r.profile.clone()).collect();
    let result = TraceNormsResult {
        mean: mean_profile(&profiles),
        images: results,
    };
    let out = run.write_report("trace_norms.json", &manifest, result)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn outliers(run: &Run, images: &[PathBuf], model: &ModelArgs, measure: &MeasureArgs) -> Result<()> {
    let m = load_model(model)?;
    let paths = expand_images(images)?;
    let (layer, threshold) = resolve_measure(measure, None, m.defaults.as_ref())?;
    let taps = TapSpec::none().with(layer, Site::PostMlpResidual);
    let manifest = m.manifest(run, "find-outliers", &paths, &taps)?;
    let sets = per_image(&paths, |_, path| {
        let seq = m.embed_path(path)?;
        let trace = m.vit.forward(&seq, &taps, &[])?.trace;
        Ok(find_outliers(&trace, layer, threshold)?.with_image_id(display(path)))
    })?;
    let with = sets.iter().filter(|s| !s.is_empty()).count();
    let out = run.write_report("outliers.json", &manifest, &sets)?;
    println!("{with}/{} images have outliers at layer {layer}; wrote {}", sets.len(), out.display());
    Ok(())
}

pub fn scan_registers(
    run: &Run,
    images: &[PathBuf],
    model: &ModelArgs,
    measure: &MeasureArgs,
    top_layer: Option<usize>,
    top_k: Option<usize>,
) -> Result<()> {
    let m = load_model(model)?;
    let paths = expand_images(images)?;
    let (layer, threshold) = resolve_measure(measure, None, m.defaults.as_ref())?;
    let d = m.defaults.as_ref();
    let (Some(top_layer), Some(top_k)) = (top_layer.or(d.map(|d| d.top_layer)), top_k.or(d.map(|d| d.top_k))) else {
        return Err(Usage("pass --top-layer and --top-k, or --preset".into()).into());
    };
    let config = RegisterScanConfig {
        top_layer,
        top_k,
        outlier_threshold: threshold,
        outlier_measure_layer: layer,
        images: 0,
    };
    config.validate(m.config().n_layers)?;
    let manifest = m.manifest(run, "scan-registers", &paths, &config.taps())?;
    let seqs = per_image(&paths, |_, path| m.embed_path(path))?;
    let result = find_register_neurons(&m.vit, &seqs, &config)?;
    let out = run.write_report("scan.json", &manifest, &result)?;
    for r in &result.ranked {
        println!("layer {:>3} neuron {:>5} score {:.4}", r.layer, r.neuron, r.score);
    }
    println!("wrote {}", out.display());
    Ok(())
}

/// A plan from `--plan`, or built from neuron arguments and written to `rel`.
fn obtain_plan(
    run: &Run,
    manifest: &mut regforge::io::RunManifest,
    plan_path: Option<&Path>,
    neurons: &NeuronArgs,
    build: impl FnOnce(&[NeuronId]) -> Result<InterventionPlan>,
) -> Result<InterventionPlan> {
    if let Some(p) = plan_path {
        manifest.plan_path = Some(p.to_path_buf());
        manifest.check_paths()?;
        return read_input(p);
    }
    let (ids, provenance) = resolve_neurons(neurons)?;
    if let Some(s) = &neurons.scan {
        manifest.scan_path = Some(s.clone());
    }
    let mut plan = build(&ids)?;
    if let Some(p) = provenance {
        plan = plan.with_provenance(p);
    }
    let out = run.write_report("plan.json", manifest, &plan)?;
    manifest.plan_path = Some(out);
    Ok(plan)
}

#[derive(Serialize)]
struct ShiftResult {
    image: String,
    plan: InterventionPlan,
    measured_at_layer: usize,
    threshold: f32,
    before: OutlierSet,
    after: OutlierSet,
    /// Highest-norm patch after the edit is one of the targets.
    target_is_argmax: bool,
    /// Max patch norm after each block, before and after.
    max_norms_before: Vec<f32>,
    max_norms_after: Vec<f32>,
    norms_before: Tensor,
    norms_after: Tensor,
    #[serde(skip_serializing_if = "Option::is_none")]
    cls_attention_before: Option<Tensor>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cls_attention_after: Option<Tensor>,
}

pub fn shift(
    run: &Run,
    image: &Path,
    model: &ModelArgs,
    measure: &MeasureArgs,
    plan_path: Option<&Path>,
    neurons: &NeuronArgs,
    targets: &[TargetArg],
) -> Result<()> {
    let m = load_model(model)?;
    let c = m.config();
    let last = c.n_layers - 1;
    let mut taps = TapSpec::sites(c.n_layers, &[Site::PostMlpResidual]);
    if c.has_cls {
        taps.insert(last, Site::AttentionWeights);
    }
    let images = [image.to_path_buf()];
    let mut manifest = m.manifest(run, "shift", &images, &taps)?;
    let tokens: Vec<usize> = targets.iter().map(|&t| m.patch_token(t)).collect::<Result<_>>()?;
    let plan = obtain_plan(run, &mut manifest, plan_path, neurons, |ids| {
        if tokens.is_empty() {
            return Err(Usage("shift needs --targets or --plan".into()).into());
        }
        Ok(plan_shift(ids, &tokens)?)
    })?;
    let PlanMode::ShiftToPositions { targets: planned } = &plan.mode else {
        return Err(Usage("plan is not a shift plan".into()).into());
    };
    let (layer, threshold) = resolve_measure(measure, plan.provenance.as_ref(), m.defaults.as_ref())?;

    let seq = m.embed_path(image)?;
    let base = m.vit.forward(&seq, &taps, &[])?.trace;
    let edited = apply_plan(&m.vit, &seq, &plan, &taps, None)?.output.trace;
    let before = find_outliers(&base, layer, threshold)?.with_image_id(display(image));
    let after = find_outliers(&edited, layer, threshold)?.with_image_id(display(image));
    let top = max_patch_norm(&edited, layer, Site::PostMlpResidual)?.0;
    let norms_before = patch_norm_map(&base, layer, Site::PostMlpResidual)?;
    let norms_after = patch_norm_map(&edited, layer, Site::PostMlpResidual)?;
    run.write_heatmap("heatmaps/norms_before.pgm", &norms_before, HeatScale::Log, c.image_size)?;
    run.write_heatmap("heatmaps/norms_after.pgm", &norms_after, HeatScale::Log, c.image_size)?;
    let (cls_before, cls_after) = if c.has_cls {
        let b = cls_attention_map(&base, last)?;
        let a = cls_attention_map(&edited, last)?;
        run.write_heatmap("heatmaps/cls_attention_before.pgm", &b, HeatScale::Linear, c.image_size)?;
        run.write_heatmap("heatmaps/cls_attention_after.pgm", &a, HeatScale::Linear, c.image_size)?;
        (Some(b), Some(a))
    } else {
        (None, None)
    };
    let result = ShiftResult {
        image: display(image),
        target_is_argmax: planned.contains(&top),
        measured_at_layer: layer,
        threshold,
        max_norms_before: max_norms(&base, c.n_layers)?,
        max_norms_after: max_norms(&edited, c.n_layers)?,
        plan: plan.clone(),
        before,
        after,
        norms_before,
        norms_after,
        cls_attention_before: cls_before,
        cls_attention_after: cls_after,
    };
    println!(
        "outliers before {:?}, after {:?}; argmax on target: {}",
        result.before.positions, result.after.positions, result.target_is_argmax
    );
    let out = run.write_report("shift.json", &manifest, &result)?;
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct AbsorbImage {
    image: String,
    before: OutlierSet,
    after: OutlierSet,
    /// Norm of each register at the measurement layer.
    register_norms: Vec<f32>,
    /// Head-averaged CLS attention on the registers at the last layer.
    #[serde(skip_serializing_if = "Option::is_none")]
    cls_attention_on_registers: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cls_argmax_is_register: Option<bool>,
}

#[derive(Serialize)]
struct AbsorbResult {
    plan: InterventionPlan,
    measured_at_layer: usize,
    threshold: f32,
    images: Vec<AbsorbImage>,
    with_outliers_before: usize,
    /// Images that had outliers before and none after.
    emptied: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn add_register(
    run: &Run,
    images: &[PathBuf],
    model: &ModelArgs,
    measure: &MeasureArgs,
    plan_path: Option<&Path>,
    neurons: &NeuronArgs,
    count: usize,
    init: InitArg,
) -> Result<()> {
    let m = load_model(model)?;
    let paths = expand_images(images)?;
    let c = m.config();
    let last = c.n_layers - 1;
    let mut manifest = m.manifest(run, "add-register", &paths, &TapSpec::none())?;
    let init = init.resolve(run.seed);
    let plan = obtain_plan(run, &mut manifest, plan_path, neurons, |ids| {
        Ok(plan_test_time_register(ids, count, init)?)
    })?;
    if !matches!(plan.mode, PlanMode::TestTimeRegister { .. }) {
        return Err(Usage("plan is not a test-time register plan".into()).into());
    }
    let (layer, threshold) = resolve_measure(measure, plan.provenance.as_ref(), m.defaults.as_ref())?;
    let mut taps = TapSpec::none().with(layer, Site::PostMlpResidual);
    if c.has_cls {
        taps.insert(last, Site::AttentionWeights);
    }
    manifest.taps = crate::context::tap_strings(&taps);

    let per = per_image(&paths, |i, path| {
        let seq = m.embed_path(path)?;
        let base = m.vit.forward(&seq, &taps, &[])?.trace;
        let applied = apply_plan(&m.vit, &seq, &plan, &taps, None)?;
        let trace = &applied.output.trace;
        let regs = applied.seq.register_indices();
        let register_norms = regs.iter().map(|&r| row_norm(trace, layer, r)).collect::<Result<_>>()?;
        let (on_regs, argmax) = if c.has_cls {
            let row = cls_attention_row(trace, last)?;
            let top = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
            run.write_heatmap(
                &format!("heatmaps/{}/cls_attention_after.pgm", image_label(i, path)),
                &cls_attention_map(trace, last)?,
                HeatScale::Linear,
                c.image_size,
            )?;
            (Some(regs.iter().map(|&r| row[r]).sum()), Some(regs.contains(&top)))
        } else {
            (None, None)
        };
        Ok(AbsorbImage {
            image: display(path),
            before: find_outliers(&base, layer, threshold)?.with_image_id(display(path)),
            after: find_outliers(trace, layer, threshold)?.with_image_id(display(path)),
            register_norms,
            cls_attention_on_registers: on_regs,
            cls_argmax_is_register: argmax,
        })
    })?;
    let with_outliers_before = per.iter().filter(|r| !r.before.is_empty()).count();
    let emptied = per.iter().filter(|r| !r.before.is_empty() && r.after.is_empty()).count();
    println!("{emptied}/{with_outliers_before} images with outliers are clean after adding registers");
    let result = AbsorbResult {
        plan,
        measured_at_layer: layer,
        threshold,
        images: per,
        with_outliers_before,
        emptied,
    };
    let out = run.write_report("add_register.json", &manifest, &result)?;
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct ZeroImage {
    image: String,
    before: OutlierSet,
    after: OutlierSet,
}

#[derive(Serialize)]
struct ZeroResult {
    plan: InterventionPlan,
    images: Vec<ZeroImage>,
}

pub fn zero(run: &Run, images: &[PathBuf], model: &ModelArgs, measure: &MeasureArgs, neurons: &NeuronArgs) -> Result<()> {
    let m = load_model(model)?;
    let paths = expand_images(images)?;
    let mut manifest = m.manifest(run, "zero", &paths, &TapSpec::none())?;
    let plan = obtain_plan(run, &mut manifest, None, neurons, |ids| Ok(plan_zero_out(ids)?))?;
    let (layer, threshold) = resolve_measure(measure, plan.provenance.as_ref(), m.defaults.as_ref())?;
    let taps = TapSpec::none().with(layer, Site::PostMlpResidual);
    manifest.taps = crate::context::tap_strings(&taps);
    let per = per_image(&paths, |_, path| {
        let seq = m.embed_path(path)?;
        let base = m.vit.forward(&seq, &taps, &[])?.trace;
        let edited = apply_plan(&m.vit, &seq, &plan, &taps, None)?.output.trace;
        Ok(ZeroImage {
            image: display(path),
            before: find_outliers(&base, layer, threshold)?.with_image_id(display(path)),
            after: find_outliers(&edited, layer, threshold)?.with_image_id(display(path)),
        })
    })?;
    let left = per.iter().filter(|r| !r.after.is_empty()).count();
    println!("{left}/{} images still have outliers", per.len());
    let out = run.write_report("zero.json", &manifest, ZeroResult { plan, images: per })?;
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct BiasImage {
    image: String,
    before: OutlierSet,
    /// Most outliers at any layer with the biases in place.
    max_outliers_any_layer: usize,
    /// Relative L2 distance between the CLS outputs of the bias run and of a
    /// run with one zero-initialized register.
    #[serde(skip_serializing_if = "Option::is_none")]
    cls_relative_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cls_cosine: Option<f64>,
}

#[derive(Serialize)]
struct BiasResult {
    neurons: Vec<NeuronId>,
    scope: BiasScope,
    calibration_size: usize,
    threshold: f32,
    images: Vec<BiasImage>,
}

#[allow(clippy::too_many_arguments)]
pub fn attn_bias(
    run: &Run,
    images: &[PathBuf],
    model: &ModelArgs,
    measure: &MeasureArgs,
    neurons: &NeuronArgs,
    calibrate: &[PathBuf],
    bias_path: Option<&Path>,
    scope: BiasScope,
) -> Result<()> {
    let m = load_model(model)?;
    let paths = expand_images(images)?;
    let c = m.config();
    let all = TapSpec::sites(c.n_layers, &[Site::PostMlpResidual]);
    let mut manifest = m.manifest(run, "attn-bias", &paths, &all)?;
    let (ids, provenance) = resolve_neurons(neurons)?;
    manifest.scan_path = neurons.scan.clone();
    let (layer, threshold) = resolve_measure(measure, provenance.as_ref(), m.defaults.as_ref())?;

    let bias: AttentionBias = match bias_path {
        Some(p) => read_input(p)?,
        None => {
            let calib_paths = expand_images(calibrate)?;
            let calib = per_image(&calib_paths, |_, p| m.embed_path(p))?;
            let bias = derive_attention_bias(&m.vit, &calib, &ids, scope)?;
            let mut bm = manifest.clone();
            bm.images = calib_paths;
            run.write_report("bias.json", &bm, &bias)?;
            bias
        }
    };
    let zero_plan = plan_zero_out(&ids)?;
    let reg_plan = plan_test_time_register(&ids, 1, RegisterInit::Zeros)?;
    let per = per_image(&paths, |_, path| {
        let seq = m.embed_path(path)?;
        let base = m.vit.forward(&seq, &all, &[])?.trace;
        let biased = apply_plan(&m.vit, &seq, &zero_plan, &all, Some(&bias))?.output;
        let max_outliers_any_layer = (0..c.n_layers)
            .map(|l| Ok(find_outliers(&biased.trace, l, threshold)?.len()))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .max()
            .unwrap_or(0);
        let (err, cos) = match seq.cls_index() {
            Some(cls) => {
                let with_reg = apply_plan(&m.vit, &seq, &reg_plan, &TapSpec::none(), None)?.output;
                let (a, b) = (biased.outputs.row(cls), with_reg.outputs.row(cls));
                let diff: f64 = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
                let scale: f64 = b.iter().map(|y| (*y as f64).powi(2)).sum::<f64>().sqrt();
                (Some(diff / scale.max(f64::MIN_POSITIVE)), Some(cosine(a, b)))
            }
            None => (None, None),
        };
        Ok(BiasImage {
            image: display(path),
            before: find_outliers(&base, layer, threshold)?.with_image_id(display(path)),
            max_outliers_any_layer,
            cls_relative_error: err,
            cls_cosine: cos,
        })
    })?;
    let clean = per.iter().filter(|r| r.max_outliers_any_layer == 0).count();
    println!("{clean}/{} images have no outliers at any layer with the biases", per.len());
    let result = BiasResult {
        neurons: ids,
        scope,
        calibration_size: bias.calibration_size,
        threshold,
        images: per,
    };
    let out = run.write_report("attn_bias.json", &manifest, &result)?;
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct DecomposeResult {
    image: String,
    neurons: Vec<NeuronId>,
    /// Per-token norm of the register contribution.
    register_norms: Vec<f32>,
    /// Per-token norm of the contribution from every other token.
    non_register_norms: Vec<f32>,
    /// Mean cosine of the register contribution with k registers against one.
    count_cosines: Vec<(usize, f64)>,
    decomposition: DecompositionReport,
}

pub fn decompose(
    run: &Run,
    image: &Path,
    model: &ModelArgs,
    neurons: &NeuronArgs,
    registers: usize,
    layer: Option<usize>,
) -> Result<()> {
    let m = load_model(model)?;
    let c = m.config();
    let layer = layer.unwrap_or(c.n_layers - 1);
    if layer >= c.n_layers {
        return Err(regforge::Error::Index {
            what: "layer",
            index: layer,
            len: c.n_layers,
        }
        .into());
    }
    if registers == 0 {
        return Err(Usage("--registers must be at least 1".into()).into());
    }
    let taps = TapSpec::none()
        .with(layer, Site::AttentionWeights)
        .with(layer, Site::AttentionValues);
    let mut manifest = m.manifest(run, "decompose", &[image.to_path_buf()], &taps)?;
    let (ids, _) = resolve_neurons(neurons)?;
    manifest.scan_path = neurons.scan.clone();
    let seq = m.embed_path(image)?;
    let plan = plan_test_time_register(&ids, registers, RegisterInit::Zeros)?;
    let applied = apply_plan(&m.vit, &seq, &plan, &taps, None)?;
    let report = decompose_attention(&applied.output.trace, layer, &applied.seq.register_indices())?;
    let counts: Vec<usize> = (1..=registers).collect();
    let count_cosines = register_count_cosines(&m.vit, &seq, &ids, &counts, layer)?;
    let result = DecomposeResult {
        image: display(image),
        neurons: ids,
        register_norms: tensor::row_norms(&report.registers)?.data().to_vec(),
        non_register_norms: tensor::row_norms(&report.non_registers)?.data().to_vec(),
        count_cosines,
        decomposition: report,
    };
    for (k, cos) in &result.count_cosines {
        println!("registers {k}: cosine vs one register {cos:.6}");
    }
    let out = run.write_report("decompose.json", &manifest, &result)?;
    println!("wrote {}", out.display());
    Ok(())
}
