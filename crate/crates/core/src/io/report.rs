// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Inputs and settings that reproduce a run. Embedded in every report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_path: Option<PathBuf>,
    pub config_name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scan_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan_path: Option<PathBuf>,
    /// `(layer, site)` pairs recorded, as `"layer:site"`.
    #[serde(default)]
    pub taps: Vec<String>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub preprocessing: String,
}

impl RunManifest {
    pub fn new(command: &str, config_name: &str, out_dir: &Path, seed: u64) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_name: config_name.into(),
            out_dir: out_dir.to_path_buf(),
            seed,
            preprocessing: "shorter-side bilinear resize (half-pixel centers), center crop, per-channel (x/255 - mean)/std".into(),
            ..Default::default()
        }
    }

    /// Every referenced input file exists.
    pub fn check_paths(&self) -> Result<()> {
        let inputs = self
            .model_path
            .iter()
            .chain(&self.images)
            .chain(&self.scan_path)
            .chain(&self.plan_path);
        for p in inputs {
            if !p.exists() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("{} does not exist", p.display()),
                )));
            }
        }
        Ok(())
    }
}

/// A result with the manifest that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report<T> {
    pub manifest: RunManifest,
    pub result: T,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}
