// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major `f32` tensors and the numeric kernels the ViT runtime needs.
//!
//! Every kernel has two implementations: the one in [`ops`] used by the
//! runtime, and a deliberately naive one in [`reference`] that the test suite
//! compares against. Accumulations (matmul, norms, layernorm statistics) run in
//! `f64`; results are stored as `f32`.
//!
//! Non-finite values are never returned silently. Every kernel scans its
//! output and reports the first NaN/Inf as [`TensorError::NumericFault`].

pub mod ops;
pub mod reference;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ops::{
    add, gelu, gelu_scalar, layernorm, matmul, matmul_transb, quick_gelu, quick_gelu_scalar,
    row_norms, softmax,
};

/// Errors raised by the kernel layer.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    /// Shapes are incompatible for the requested operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension {
        /// Kernel that rejected its inputs.
        op: &'static str,
        /// Human-readable description of both shapes.
        detail: String,
    },
    /// A NaN or infinity appeared in a kernel's output.
    #[error("numeric fault in {op}: non-finite value at flat index {index}")]
    NumericFault {
        /// Kernel that produced the value.
        op: &'static str,
        /// First offending flat index.
        index: usize,
    },
    /// Axis out of range for the tensor rank.
    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis {
        /// Requested axis.
        axis: usize,
        /// Rank of the tensor.
        rank: usize,
    },
}

/// Result alias for kernel calls.
pub type TensorResult<T> = std::result::Result<T, TensorError>;

/// Row-major dense tensor of `f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> TensorResult<Self> {
        if shape.contains(&0) {
            return Err(TensorError::Dimension {
                op: "tensor",
                detail: format!("zero-sized dimension in shape {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Dimension {
                op: "tensor",
                detail: format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    /// All-zero tensor.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    /// Tensor filled with a constant.
    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// 1-D tensor from a vector.
    pub fn from_vec(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> TensorResult<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Dimension {
                op: "from_rows",
                detail: "ragged rows".into(),
            });
        }
        Self::new(
            vec![rows.len(), cols],
            rows.iter().flatten().copied().collect(),
        )
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows when viewed as a matrix `[prod(shape[..-1]) × shape[-1]]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Row `i` of the matrix view.
    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Element `(i, j)` of a 2-D tensor.
    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    /// Same data, new shape.
    pub fn reshape(self, shape: Vec<usize>) -> TensorResult<Self> {
        Self::new(shape, self.data)
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> TensorResult<Self> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new(vec![n, m], out)
    }

    /// Column `j` of a 2-D tensor.
    pub fn column(&self, j: usize) -> Vec<f32> {
        let c = self.cols();
        (0..self.rows()).map(|i| self.data[i * c + j]).collect()
    }

    /// Rows `range` of the matrix view, as a new 2-D tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> TensorResult<Self> {
        let c = self.cols();
        Self::new(vec![end - start, c], self.data[start * c..end * c].to_vec())
    }

    /// `(rows, cols)` of a 2-D tensor, or a dimension error naming `op`.
    pub fn dims2(&self, op: &'static str) -> TensorResult<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            other => Err(TensorError::Dimension {
                op,
                detail: format!("expected a 2-D tensor, got shape {other:?}"),
            }),
        }
    }

    /// Fails with [`TensorError::NumericFault`] at the first non-finite element.
    pub fn check_finite(&self, op: &'static str) -> TensorResult<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(TensorError::NumericFault { op, index }),
            None => Ok(()),
        }
    }
}
