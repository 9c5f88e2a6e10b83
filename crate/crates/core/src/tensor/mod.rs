//! Minimal dense-tensor engine with reverse-mode automatic
//! differentiation, sufficient to train every model in this crate.
//!
//! Values are 32-bit floats in row-major order; reductions accumulate in
//! 64-bit. Operations are recorded on a [`Tape`] which replays backward
//! to populate gradients. Kernels are plain loops with optional internal
//! data parallelism; results are bit-identical regardless of thread
//! count because every output element is produced by exactly one task in
//! a fixed order.

mod kernels;
mod tape;

pub mod fdcheck;
pub mod optim;

pub use optim::{Adam, Sgd};
pub use tape::{Tape, TensorId};

use std::fmt;

/// Dense n-dimensional array of `f32` values in row-major order.
///
/// A tensor owns its values and, after a backward pass has been applied
/// through [`optim`] plumbing, optionally a gradient of the same length.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor from a shape and matching row-major values.
    ///
    /// Fails if the shape product disagrees with the value count or if any
    /// value is non-finite. A zero dimension is allowed (an empty batch is
    /// a legitimate value); the rank must still be at least one.
    pub fn new(shape: &[usize], values: Vec<f32>) -> Result<Self, TensorError> {
        if shape.is_empty() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len: values.len(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len: values.len(),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "tensor_new" });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
            grad: None,
            requires_grad: false,
        })
    }

    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    /// Marks the tensor as a trainable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Mutable view of the raw values. The caller is responsible for
    /// keeping them finite; constructors and ops re-check on use.
    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Installs a gradient, replacing any previous one.
    pub fn set_grad(&mut self, grad: Vec<f32>) {
        debug_assert_eq!(grad.len(), self.values.len());
        self.grad = Some(grad);
    }

    /// Removes and returns the gradient, leaving the slot empty.
    pub fn take_grad(&mut self) -> Option<Vec<f32>> {
        self.grad.take()
    }

    /// Reinterprets the value buffer under a new shape of equal size.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.values.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len: self.values.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

/// Errors reported by tensor construction, tape operations, backward
/// passes, and optimizer steps.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// A shape product disagrees with a value count, or the shape is empty.
    InvalidShape { shape: Vec<usize>, len: usize },
    /// Operation inputs have incompatible shapes; carries the operation
    /// name and a rendering of the offending dimensions.
    ShapeMismatch { op: &'static str, detail: String },
    /// An operation produced a NaN or infinite value.
    NonFinite { op: &'static str },
    /// `backward` was called on a tensor that is not a scalar.
    NonScalarLoss { shape: Vec<usize> },
    /// `backward` was called on an empty tape.
    EmptyTape,
    /// An optimizer step found a parameter without a populated gradient.
    MissingGrad { param: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::InvalidShape { shape, len } => write!(
                f,
                "invalid shape {:?} for a buffer of {} values",
                shape, len
            ),
            TensorError::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in {}: {}", op, detail)
            }
            TensorError::NonFinite { op } => {
                write!(f, "non-finite value produced by {}", op)
            }
            TensorError::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {:?}", shape)
            }
            TensorError::EmptyTape => write!(f, "backward called on an empty tape"),
            TensorError::MissingGrad { param } => {
                write!(f, "optimizer step: parameter {} has no gradient", param)
            }
        }
    }
}

impl std::error::Error for TensorError {}
