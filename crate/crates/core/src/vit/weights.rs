// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named parameters and the on-disk weight container.
//!
//! The container is the safetensors layout: an 8-byte little-endian header
//! length, a JSON header mapping each tensor name to `{dtype, shape,
//! data_offsets}`, then the raw little-endian buffer. `F32` and `F16` payloads
//! are accepted; `F16` is widened to `f32` at load time.
//!
//! Released checkpoints use their own parameter names. A [`NameRemap`] (JSON
//! object, canonical name → source name) bridges the two without touching the
//! file.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Canonical parameter name → tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Checks every parameter `config` demands is present with its exact shape.
    /// Extra names are logged and otherwise ignored.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let required = required_parameters(config);
        for (name, shape) in &required {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ParameterShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
        }
        let extra = self
            .tensors
            .keys()
            .filter(|k| !required.iter().any(|(n, _)| n == *k))
            .count();
        if extra > 0 {
            log::warn!("ignoring {extra} parameters not used by {}", config.name);
        }
        Ok(())
    }
}

/// Every parameter a config needs, with its canonical shape.
pub fn required_parameters(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.embed_dim;
    let n = config.mlp_hidden;
    let p = config.patch_size;
    let mut out = vec![("patch_embed.weight".to_string(), vec![d, 3, p, p])];
    if config.patch_bias {
        out.push(("patch_embed.bias".into(), vec![d]));
    }
    if config.has_cls {
        out.push(("cls_token".into(), vec![d]));
    }
    out.push(("pos_embed".into(), vec![config.base_tokens(), d]));
    if config.embed_norm {
        out.push(("pre_norm.weight".into(), vec![d]));
        out.push(("pre_norm.bias".into(), vec![d]));
    }
    for l in 0..config.n_layers {
        let b = format!("blocks.{l}");
        out.push((format!("{b}.norm1.weight"), vec![d]));
        out.push((format!("{b}.norm1.bias"), vec![d]));
        out.push((format!("{b}.attn.qkv.weight"), vec![3 * d, d]));
        out.push((format!("{b}.attn.qkv.bias"), vec![3 * d]));
        out.push((format!("{b}.attn.proj.weight"), vec![d, d]));
        out.push((format!("{b}.attn.proj.bias"), vec![d]));
        out.push((format!("{b}.norm2.weight"), vec![d]));
        out.push((format!("{b}.norm2.bias"), vec![d]));
        out.push((format!("{b}.mlp.fc1.weight"), vec![n, d]));
        out.push((format!("{b}.mlp.fc1.bias"), vec![n]));
        out.push((format!("{b}.mlp.fc2.weight"), vec![d, n]));
        out.push((format!("{b}.mlp.fc2.bias"), vec![d]));
        if config.layer_scale {
            out.push((format!("{b}.ls1"), vec![d]));
            out.push((format!("{b}.ls2"), vec![d]));
        }
    }
    if config.final_norm {
        out.push(("norm.weight".into(), vec![d]));
        out.push(("norm.bias".into(), vec![d]));
    }
    out
}

/// Canonical name → name used inside a foreign checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NameRemap(pub BTreeMap<String, String>);

impl NameRemap {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn source<'a>(&'a self, canonical: &'a str) -> &'a str {
        self.0.get(canonical).map_or(canonical, String::as_str)
    }
}

/// On-disk element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StorageDtype {
    F32,
    F16,
}

/// Every tensor in a container, widened to `f32`, under its stored name.
pub fn read_container(bytes: &[u8]) -> Result<HashMap<String, Tensor>> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Container(e.to_string()))?;
    let mut out = HashMap::new();
    for (name, view) in st.tensors() {
        let raw = view.data();
        let data: Vec<f32> = match view.dtype() {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            Dtype::F16 => raw
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            other => {
                return Err(Error::Container(format!(
                    "tensor `{name}` has unsupported dtype {other:?}"
                )))
            }
        };
        let shape = if view.shape().is_empty() {
            vec![1]
        } else {
            view.shape().to_vec()
        };
        let t = Tensor::new(shape, data).map_err(|e| Error::Container(format!("{name}: {e}")))?;
        out.insert(name, t);
    }
    Ok(out)
}

/// Serializes a store. Tensor order in the file is deterministic, so equal
/// stores give equal bytes.
pub fn write_container(store: &WeightStore, dtype: StorageDtype) -> Result<Vec<u8>> {
    let encoded: Vec<(String, Vec<usize>, Vec<u8>)> = store
        .iter()
        .map(|(name, t)| {
            let bytes = match dtype {
                StorageDtype::F32 => t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
                StorageDtype::F16 => t
                    .data()
                    .iter()
                    .flat_map(|&v| half::f16::from_f32(v).to_le_bytes())
                    .collect(),
            };
            (name.to_string(), t.shape().to_vec(), bytes)
        })
        .collect();
    let st_dtype = match dtype {
        StorageDtype::F32 => Dtype::F32,
        StorageDtype::F16 => Dtype::F16,
    };
    let views = encoded
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(st_dtype, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Container(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize(views, &None).map_err(|e| Error::Container(e.to_string()))
}

pub fn save_weights(path: &Path, store: &WeightStore, dtype: StorageDtype) -> Result<()> {
    std::fs::write(path, write_container(store, dtype)?)?;
    Ok(())
}

/// Drops leading singleton axes (`[1, 1, d]` → `[d]`).
fn squeeze_leading(shape: &[usize]) -> &[usize] {
    let first = shape
        .iter()
        .position(|&s| s != 1)
        .unwrap_or(shape.len().saturating_sub(1));
    &shape[first..]
}

/// Builds a validated store from container tensors keyed by source name.
pub fn resolve_parameters(
    mut source: HashMap<String, Tensor>,
    config: &ModelConfig,
    remap: Option<&NameRemap>,
) -> Result<WeightStore> {
    config.validate()?;
    let identity = NameRemap::default();
    let remap = remap.unwrap_or(&identity);
    let mut store = WeightStore::new();
    for (name, shape) in required_parameters(config) {
        let src = remap.source(&name).to_string();
        let t = source
            .remove(&src)
            .ok_or_else(|| Error::MissingParameter(name.clone()))?;
        if squeeze_leading(t.shape()) != squeeze_leading(&shape) {
            return Err(Error::ParameterShape {
                name,
                expected: shape,
                got: t.shape().to_vec(),
            });
        }
        store.insert(name, t.reshape(shape)?);
    }
    if !source.is_empty() {
        log::warn!(
            "ignoring {} container tensors not used by {}",
            source.len(),
            config.name
        );
    }
    Ok(store)
}

/// Reads a container file and resolves it against `config`.
pub fn load_weights(
    path: &Path,
    config: &ModelConfig,
    remap: Option<&NameRemap>,
) -> Result<WeightStore> {
    let bytes = std::fs::read(path)?;
    resolve_parameters(read_container(&bytes)?, config, remap)
}

/// Gain and bias of one layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gain: Vec<f32>,
    pub bias: Vec<f32>,
}

/// One transformer block's parameters in runtime layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub norm1: Norm,
    /// `[3d × d]`, rows ordered query, key, value.
    pub qkv_weight: Tensor,
    pub qkv_bias: Vec<f32>,
    pub proj_weight: Tensor,
    pub proj_bias: Vec<f32>,
    pub ls1: Option<Vec<f32>>,
    pub norm2: Norm,
    /// `[N × d]`.
    pub fc1_weight: Tensor,
    pub fc1_bias: Vec<f32>,
    /// `[d × N]`; column `n` is neuron `n`'s decoder direction.
    pub fc2_weight: Tensor,
    pub fc2_bias: Vec<f32>,
    pub ls2: Option<Vec<f32>>,
}

/// Typed view of a validated [`WeightStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct VitWeights {
    /// `[d × 3·p·p]`, patch pixels flattened channel-major.
    pub patch_weight: Tensor,
    pub patch_bias: Vec<f32>,
    pub cls_token: Option<Vec<f32>>,
    pub pos_embed: Tensor,
    pub pre_norm: Option<Norm>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Option<Norm>,
}

impl VitWeights {
    pub fn from_store(store: &WeightStore, config: &ModelConfig) -> Result<Self> {
        store.validate(config)?;
        let d = config.embed_dim;
        let vec = |name: &str| -> Result<Vec<f32>> { Ok(store.get(name)?.data().to_vec()) };
        let norm = |prefix: &str| -> Result<Norm> {
            Ok(Norm {
                gain: vec(&format!("{prefix}.weight"))?,
                bias: vec(&format!("{prefix}.bias"))?,
            })
        };
        let patch_len = 3 * config.patch_size * config.patch_size;
        let patch_weight = store
            .get("patch_embed.weight")?
            .clone()
            .reshape(vec![d, patch_len])?;
        let patch_bias = if config.patch_bias {
            vec("patch_embed.bias")?
        } else {
            vec![0.0; d]
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let b = format!("blocks.{l}");
            layers.push(LayerWeights {
                norm1: norm(&format!("{b}.norm1"))?,
                qkv_weight: store.get(&format!("{b}.attn.qkv.weight"))?.clone(),
                qkv_bias: vec(&format!("{b}.attn.qkv.bias"))?,
                proj_weight: store.get(&format!("{b}.attn.proj.weight"))?.clone(),
                proj_bias: vec(&format!("{b}.attn.proj.bias"))?,
                ls1: config
                    .layer_scale
                    .then(|| vec(&format!("{b}.ls1")))
                    .transpose()?,
                norm2: norm(&format!("{b}.norm2"))?,
                fc1_weight: store.get(&format!("{b}.mlp.fc1.weight"))?.clone(),
                fc1_bias: vec(&format!("{b}.mlp.fc1.bias"))?,
                fc2_weight: store.get(&format!("{b}.mlp.fc2.weight"))?.clone(),
                fc2_bias: vec(&format!("{b}.mlp.fc2.bias"))?,
                ls2: config
                    .layer_scale
                    .then(|| vec(&format!("{b}.ls2")))
                    .transpose()?,
            });
        }
        Ok(Self {
            patch_weight,
            patch_bias,
            cls_token: config.has_cls.then(|| vec("cls_token")).transpose()?,
            pos_embed: store.get("pos_embed")?.clone(),
            pre_norm: config.embed_norm.then(|| norm("pre_norm")).transpose()?,
            layers,
            final_norm: config.final_norm.then(|| norm("norm")).transpose()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::random_model;

    #[test]
    fn squeeze() {
        assert_eq!(squeeze_leading(&[1, 1, 8]), &[8]);
        assert_eq!(squeeze_leading(&[1]), &[1]);
        assert_eq!(squeeze_leading(&[3, 1]), &[3, 1]);
    }

    #[test]
    fn missing_parameter_is_named() {
        let (config, store) = random_model(3);
        let mut bytes_src: HashMap<String, Tensor> =
            store.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        bytes_src.remove("blocks.1.mlp.fc2.weight");
        match resolve_parameters(bytes_src, &config, None) {
            Err(Error::MissingParameter(n)) => assert_eq!(n, "blocks.1.mlp.fc2.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let (config, store) = random_model(4);
        let mut src: HashMap<String, Tensor> =
            store.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        src.insert("norm.weight".into(), Tensor::zeros(&[config.embed_dim + 1]));
        match resolve_parameters(src, &config, None) {
            Err(Error::ParameterShape { name, expected, got }) => {
                assert_eq!(name, "norm.weight");
                assert_eq!(expected, vec![config.embed_dim]);
                assert_eq!(got, vec![config.embed_dim + 1]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn remap_and_leading_singletons() {
        let (config, store) = random_model(5);
        let mut src: HashMap<String, Tensor> =
            store.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        let cls = src.remove("cls_token").unwrap();
        let d = cls.numel();
        src.insert("class_embedding".into(), cls.reshape(vec![1, 1, d]).unwrap());
        let mut remap = NameRemap::default();
        remap.0.insert("cls_token".into(), "class_embedding".into());
        let loaded = resolve_parameters(src, &config, Some(&remap)).unwrap();
        assert_eq!(loaded, store);
    }

    #[test]
    fn unsupported_dtype() {
        let bytes = [0u8; 4];
        let view = TensorView::new(Dtype::I32, vec![1], &bytes).unwrap();
        let buf = safetensors::serialize(vec![("x".to_string(), view)], &None).unwrap();
        assert!(matches!(read_container(&buf), Err(Error::Container(_))));
    }
}
