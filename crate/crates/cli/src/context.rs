// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model and image loading, argument resolution and output writing shared by
//! every subcommand.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use rayon::prelude::*;
use regforge::io::{preprocess, render_heatmap, upscale, write_json, HeatScale, Image, Report, RunManifest};
use regforge::registers::{NeuronId, RegisterScanConfig, RegisterScanResult};
use regforge::vit::{FamilyDefaults, ModelConfig, NameRemap, TapSpec, TokenSequence, Vit};
use regforge::Tensor;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{MeasureArgs, ModelArgs, NeuronArgs, Preset};

/// Bad or missing arguments. Exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// A check that should always hold did not. Exit code 5.
#[derive(Debug)]
pub struct Invariant(pub String);

impl fmt::Display for Invariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invariant {}

/// `layer:neuron`.
#[derive(Debug, Clone, Copy)]
pub struct NeuronArg(pub NeuronId);

impl FromStr for NeuronArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (l, n) = s
            .split_once(':')
            .ok_or_else(|| format!("expected layer:neuron, got `{s}`"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
        Ok(Self(NeuronId::new(parse(l)?, parse(n)?)))
    }
}

/// `row,col` on the patch grid.
#[derive(Debug, Clone, Copy)]
pub struct TargetArg {
    pub row: usize,
    pub col: usize,
}

impl FromStr for TargetArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (r, c) = s
            .split_once(',')
            .ok_or_else(|| format!("expected row,col, got `{s}`"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
        Ok(Self {
            row: parse(r)?,
            col: parse(c)?,
        })
    }
}

/// Output directory and seed of one invocation.
pub struct Run {
    pub out: PathBuf,
    pub seed: u64,
}

impl Run {
    pub fn new(out: PathBuf, seed: u64) -> Result<Self> {
        std::fs::create_dir_all(&out)
            .with_context(|| format!("creating output directory {}", out.display()))?;
        Ok(Self { out, seed })
    }

    /// `rel` under the output directory, parents created.
    pub fn path(&self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let p = self.out.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    pub fn manifest(&self, command: &str, config_name: &str) -> RunManifest {
        RunManifest::new(command, config_name, &self.out, self.seed)
    }

    pub fn write_report<T: Serialize>(&self, rel: &str, manifest: &RunManifest, result: T) -> Result<PathBuf> {
        let path = self.path(rel)?;
        let report = Report {
            manifest: manifest.clone(),
            result,
        };
        write_json(&path, &report).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Writes `grid` as a heatmap scaled up to `size` pixels per side.
    pub fn write_heatmap(&self, rel: &str, grid: &Tensor, scale: HeatScale, size: usize) -> Result<()> {
        let img = upscale(&render_heatmap(grid, scale)?, size, size);
        img.save_pgm(&self.path(rel)?)?;
        Ok(())
    }
}

/// A loaded model and where it came from.
pub struct Loaded {
    pub vit: Vit,
    pub model_path: PathBuf,
    pub defaults: Option<FamilyDefaults>,
}

impl Loaded {
    pub fn config(&self) -> &ModelConfig {
        &self.vit.config
    }

    pub fn embed_path(&self, path: &Path) -> Result<TokenSequence> {
        let img = Image::open(path).with_context(|| format!("reading image {}", path.display()))?;
        let pixels = preprocess(&img, &self.vit.config)?;
        Ok(self.vit.embed(&pixels)?)
    }

    /// Manifest with the model and inputs filled in, checked for existence.
    pub fn manifest(&self, run: &Run, command: &str, images: &[PathBuf], taps: &TapSpec) -> Result<RunManifest> {
        let mut m = run.manifest(command, &self.vit.config.name);
        m.model_path = Some(self.model_path.clone());
        m.images = images.to_vec();
        m.taps = tap_strings(taps);
        m.check_paths()?;
        Ok(m)
    }

    /// Token index of a grid cell, bounds-checked.
    pub fn patch_token(&self, t: TargetArg) -> Result<usize> {
        let g = self.vit.config.grid();
        for (what, v) in [("target row", t.row), ("target column", t.col)] {
            if v >= g {
                return Err(regforge::Error::Index { what, index: v, len: g }.into());
            }
        }
        Ok(regforge::vit::patch_token(&self.vit.config, t.row, t.col))
    }
}

pub fn load_model(args: &ModelArgs) -> Result<Loaded> {
    let (config, defaults) = match (args.preset, &args.config) {
        (Some(Preset::OpenclipVitB16), _) => {
            (ModelConfig::openclip_vit_b16(), Some(FamilyDefaults::openclip_vit_b16()))
        }
        (Some(Preset::Dinov2VitL14), _) => {
            (ModelConfig::dinov2_vit_l14(), Some(FamilyDefaults::dinov2_vit_l14()))
        }
        (None, Some(path)) => (read_input::<ModelConfig>(path)?, None),
        (None, None) => {
            let beside = args
                .model
                .parent()
                .unwrap_or(Path::new("."))
                .join("config.json");
            if !beside.exists() {
                return Err(Usage(format!(
                    "no model config: pass --config or --preset, or place config.json next to {}",
                    args.model.display()
                ))
                .into());
            }
            (read_input::<ModelConfig>(&beside)?, None)
        }
    };
    let remap = args
        .remap
        .as_deref()
        .map(NameRemap::from_json_file)
        .transpose()
        .context("reading name remap")?;
    let vit = Vit::load(&args.model, config, remap.as_ref())
        .with_context(|| format!("loading weights from {}", args.model.display()))?;
    Ok(Loaded {
        vit,
        model_path: args.model.clone(),
        defaults,
    })
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("ppm") | Some("png")
    )
}

/// Files as given, directories expanded to their images in name order.
pub fn expand_images(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|e| e.is_file() && is_image(e))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(regforge::Error::EmptyInput("image set").into());
    }
    Ok(out)
}

/// A short, unique label for the i-th image, used in output file names.
pub fn image_label(i: usize, path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    format!("{i:03}_{stem}")
}

/// Runs `f` on every image on the worker pool, keeping input order.
pub fn per_image<T, F>(paths: &[PathBuf], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &Path) -> Result<T> + Sync,
{
    paths
        .par_iter()
        .enumerate()
        .map(|(i, p)| f(i, p).with_context(|| format!("image {}", p.display())))
        .collect()
}

pub fn tap_strings(taps: &TapSpec) -> Vec<String> {
    taps.iter().map(|(l, s)| format!("{l}:{}", s.as_str())).collect()
}

/// Reads `T` from a JSON file holding either a bare `T` or a report wrapping one.
pub fn read_input<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let value: serde_json::Value =
        regforge::io::read_json(path).with_context(|| format!("reading {}", path.display()))?;
    let inner = match value {
        serde_json::Value::Object(mut map) if map.contains_key("manifest") && map.contains_key("result") => {
            map.remove("result").expect("checked")
        }
        v => v,
    };
    serde_json::from_value(inner)
        .map_err(regforge::Error::from)
        .with_context(|| format!("decoding {}", path.display()))
}

/// Neurons to intervene on, with the scan settings that found them if known.
pub fn resolve_neurons(args: &NeuronArgs) -> Result<(Vec<NeuronId>, Option<RegisterScanConfig>)> {
    let (mut neurons, provenance) = if let Some(path) = &args.scan {
        let scan: RegisterScanResult = read_input(path)?;
        (scan.neurons(), Some(scan.config))
    } else if !args.neurons.is_empty() {
        (args.neurons.iter().map(|n| n.0).collect(), None)
    } else {
        return Err(Usage("name the neurons with --scan or --neurons".into()).into());
    };
    if let Some(k) = args.top_k {
        neurons.truncate(k);
    }
    if neurons.is_empty() {
        return Err(regforge::Error::Plan("no neurons selected".into()).into());
    }
    Ok((neurons, provenance))
}

/// Outlier layer and threshold: flags, then scan provenance, then preset.
pub fn resolve_measure(
    args: &MeasureArgs,
    provenance: Option<&RegisterScanConfig>,
    defaults: Option<&FamilyDefaults>,
) -> Result<(usize, f32)> {
    let layer = args
        .layer
        .or(provenance.map(|p| p.outlier_measure_layer))
        .or(defaults.map(|d| d.outlier_measure_layer));
    let threshold = args
        .threshold
        .or(provenance.map(|p| p.outlier_threshold))
        .or(defaults.map(|d| d.outlier_threshold));
    match (layer, threshold) {
        (Some(l), Some(t)) => Ok((l, t)),
        _ => Err(Usage(
            "outlier measurement unknown: pass --layer and --threshold, a scan or plan that records them, or --preset"
                .into(),
        )
        .into()),
    }
}
