//! Dense float64 tensors and the reverse-mode differentiation tape.
//!
//! Tensors are row-major `Vec<f64>` buffers with a shape and an optional
//! gradient slot. All differentiable computation goes through [`Tape`],
//! which records every operation and replays it in exact reverse order
//! on [`Tape::backward`]. Only rank-1 and rank-2 shapes are supported;
//! that is all the fusion model needs.

mod tape;

pub use tape::{NodeId, Tape};

use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} implies {expected} elements but buffer holds {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected a {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: reduction over an empty extent in shape {shape:?}")]
    EmptyReduction { op: &'static str, shape: Vec<usize> },
    #[error("masked softmax: row {row} has no valid positions")]
    AllMaskedRow { row: usize },
    #[error("{op}: mask length {mask_len} does not match {expected} entries")]
    MaskLength {
        op: &'static str,
        mask_len: usize,
        expected: usize,
    },
    #[error("dropout rate {rate} outside [0, 1)")]
    InvalidDropoutRate { rate: f64 },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward has already run on this tape; build a fresh tape per step")]
    BackwardAlreadyRun,
    #[error("node {index} is not on this tape ({len} nodes recorded)")]
    DetachedNode { index: usize, len: usize },
    #[error("gradients are not available before backward()")]
    GradsNotReady,
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("shape extents must be positive, got {shape:?}")]
    ZeroExtent { shape: Vec<usize> },
}

/// Dense row-major float64 tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking that the buffer length matches the shape.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ZeroExtent { shape });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    /// Row-major matrix from nested rows. All rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(TensorError::RankMismatch {
                op: "from_rows",
                expected: "rectangular row list",
                shape: vec![r, c],
            });
        }
        Tensor::from_vec(vec![r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Gradient buffer, populated for parameters after a backward pass.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Number of rows when viewed as a matrix ([n] counts as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Length of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor shapes are non-empty")
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
