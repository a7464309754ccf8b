// SPDX-License-Identifier: MIT OR Apache-2.0

//! Planted-model export and the built-in invariant suite.

use std::path::Path;
use std::time::Instant;

use anyhow::Result;
use regforge::analysis::find_outliers;
use regforge::registers::{
    apply_plan, find_register_neurons, plan_shift, plan_test_time_register, plan_zero_out,
    InterventionPlan, RegisterScanConfig,
};
use regforge::synthetic::{
    generate_planted_model, random_model, reference_forward, GroundTruth, ImageTruth, PlantSpec,
};
use regforge::vit::{read_container, save_weights, write_container, EditRule, Site, StorageDtype, TapSpec, Vit};
use regforge::Tensor;
use serde::Serialize;

use crate::context::{read_input, Invariant, Run};

#[derive(Serialize)]
struct ExportedImage {
    file: String,
    truth: ImageTruth,
}

#[derive(Serialize)]
struct PlantedExport {
    spec: PlantSpec,
    truth: GroundTruth,
    /// Scan settings that match the planted mechanism.
    scan: RegisterScanConfig,
    images: Vec<ExportedImage>,
}

pub fn make_planted(run: &Run, spec_path: Option<&Path>, images: usize) -> Result<()> {
    let spec = match spec_path {
        Some(p) => read_input::<PlantSpec>(p)?,
        None => PlantSpec::sample(run.seed),
    };
    let pm = generate_planted_model(&spec)?;
    let mut manifest = run.manifest("make-planted", &pm.config.name);
    save_weights(&run.path("model.safetensors")?, &pm.store, StorageDtype::F32)?;
    regforge::io::write_json(&run.path("config.json")?, &pm.config)?;
    let mut exported = Vec::with_capacity(images);
    for (i, im) in pm.images(images, run.seed).into_iter().enumerate() {
        let file = format!("images/img_{i:03}.ppm");
        im.image.save_ppm(&run.path(&file)?)?;
        exported.push(ExportedImage { file, truth: im.truth });
    }
    manifest.model_path = Some(run.out.join("model.safetensors"));
    let result = PlantedExport {
        spec,
        scan: pm.scan_config(),
        truth: pm.truth,
        images: exported,
    };
    let out = run.write_report("truth.json", &manifest, &result)?;
    let planted: Vec<String> = result
        .truth
        .planted
        .iter()
        .map(|n| format!("{}:{}", n.layer, n.neuron))
        .collect();
    println!(
        "planted neurons {} at layer {}, outliers measured at layer {} (threshold {})",
        planted.join(","),
        result.truth.ignite_layer,
        result.truth.analysis_layer,
        result.truth.threshold
    );
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct Check {
    name: &'static str,
    passed: bool,
    detail: String,
    seconds: f64,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e:#}")),
    };
    Check {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Deterministic pixels in `[-2, 2)` without pulling in an RNG.
fn pixels(size: usize, seed: u64) -> Tensor {
    let n = 3 * size * size;
    let data = (0..n)
        .map(|i| {
            let x = ((i as f64 + 1.0) * 12.9898 + seed as f64 * 78.233).sin() * 43_758.545_3;
            (x.fract() * 4.0 - 2.0) as f32
        })
        .collect();
    Tensor::new(vec![3, size, size], data).expect("sized")
}

fn max_rel_err(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() as f64 / (1.0 + y.abs() as f64))
        .fold(0.0, f64::max)
}

fn forward_parity(seed: u64) -> Result<(bool, String)> {
    let mut worst = 0f64;
    for s in seed..seed + 8 {
        let (config, store) = random_model(s);
        let vit = Vit::new(config.clone(), &store)?;
        let seq = vit.embed(&pixels(config.image_size, s))?;
        let edits = [EditRule::move_max(s as usize % config.n_layers, s as usize % config.mlp_hidden, vec![1])];
        for e in [&edits[..0], &edits[..]] {
            let fast = vit.forward(&seq, &TapSpec::none(), e)?;
            let slow = reference_forward(&seq.tokens, &config, &store, e)?;
            worst = worst.max(max_rel_err(fast.outputs.data(), slow.outputs.data()));
        }
    }
    Ok((worst <= 1e-5, format!("max relative error {worst:.2e} over 8 models")))
}

fn container_round_trip(seed: u64) -> Result<(bool, String)> {
    let (_, store) = random_model(seed);
    let back = read_container(&write_container(&store, StorageDtype::F32)?)?;
    let same = back.len() == store.len()
        && store.iter().all(|(name, t)| back.get(name) == Some(t));
    Ok((same, format!("{} tensors", store.len())))
}

fn planted_pipeline(seed: u64) -> Result<(bool, String)> {
    let pm = generate_planted_model(&PlantSpec::sample(seed))?;
    let vit = pm.vit()?;
    let t = &pm.truth;
    let images = pm.images(4, seed);
    let seqs = images
        .iter()
        .map(|im| pm.embed(&vit, im))
        .collect::<regforge::Result<Vec<_>>>()?;
    let scan = find_register_neurons(&vit, &seqs, &pm.scan_config())?;
    let mut found = scan.neurons();
    found.sort();
    if found != t.planted {
        return Ok((false, format!("scan found {found:?}, planted {:?}", t.planted)));
    }
    let taps = TapSpec::none().with(t.analysis_layer, Site::PostMlpResidual);
    for (im, seq) in images.iter().zip(&seqs) {
        let target = seq
            .patch_indices()
            .into_iter()
            .find(|p| !im.truth.outliers.contains(p))
            .expect("some patch is not an outlier");
        let plan = plan_shift(&found, &[target])?;
        let shifted = apply_plan(&vit, seq, &plan, &taps, None)?.output.trace;
        let after = find_outliers(&shifted, t.analysis_layer, t.threshold)?;
        if after.positions != [target] {
            return Ok((false, format!("shift to {target} left outliers at {:?}", after.positions)));
        }
        let zeroed = apply_plan(&vit, seq, &plan_zero_out(&found)?, &taps, None)?.output.trace;
        if !find_outliers(&zeroed, t.analysis_layer, t.threshold)?.is_empty() {
            return Ok((false, "zeroing left outliers".into()));
        }
        let plan = plan_test_time_register(&found, 1, Default::default())?;
        let absorbed = apply_plan(&vit, seq, &plan, &taps, None)?.output.trace;
        if !find_outliers(&absorbed, t.analysis_layer, t.threshold)?.is_empty() {
            return Ok((false, "register left outliers on patches".into()));
        }
    }
    Ok((true, format!("{} neurons recovered; shift, zero and register hold on 4 images", found.len())))
}

fn plan_replay(seed: u64) -> Result<(bool, String)> {
    let pm = generate_planted_model(&PlantSpec::sample(seed))?;
    let vit = pm.vit()?;
    let seq = pm.embed(&vit, &pm.images(1, seed)[0])?;
    let plan = plan_shift(&pm.truth.planted, &[seq.patch_indices()[0]])?.with_provenance(pm.scan_config());
    let json = serde_json::to_string(&plan)?;
    let back: InterventionPlan = serde_json::from_str(&json)?;
    let a = apply_plan(&vit, &seq, &plan, &TapSpec::none(), None)?.output.outputs;
    let b = apply_plan(&vit, &seq, &back, &TapSpec::none(), None)?.output.outputs;
    let same = back == plan && a.data() == b.data();
    Ok((same, "plan survives JSON and replays bit-identically".into()))
}

pub fn self_test(run: &Run) -> Result<()> {
    let s = run.seed;
    let checks = vec![
        check("forward matches reference", || forward_parity(s)),
        check("weight container round trip", || container_round_trip(s)),
        check("planted pipeline", || planted_pipeline(s)),
        check("plan replay", || plan_replay(s)),
    ];
    for c in &checks {
        let status = if c.passed { "ok  " } else { "FAIL" };
        println!("{status} {} ({}, {:.2}s)", c.name, c.detail, c.seconds);
    }
    let manifest = run.manifest("self-test", "built-in");
    run.write_report("self_test.json", &manifest, &checks)?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Invariant(format!("self-test failed: {}", failed.join(", "))).into())
    }
}
