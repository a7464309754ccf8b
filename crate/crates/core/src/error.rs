// SPDX-License-Identifier: MIT OR Apache-2.0

use thiserror::Error;

use crate::tensor::TensorError;
use crate::vit::Site;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{what} index {index} out of range (len {len})")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("layer {layer} site {site} was not tapped")]
    MissingTap { layer: usize, site: Site },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("every image in the scan set was outlier-free")]
    EmptyScan,

    #[error("plan error: {0}")]
    Plan(String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("infeasible planted spec: {0}")]
    Spec(String),

    #[error("weight container: {0}")]
    Container(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for NaN/Inf faults raised by the kernel layer.
    pub fn is_numeric_fault(&self) -> bool {
        matches!(self, Error::Tensor(TensorError::NumericFault { .. }))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
