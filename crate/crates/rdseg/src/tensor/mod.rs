//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The op set is deliberately small: exactly what the segmentation models and
//! the distillation losses need. Values live on a [`Tape`] that records every
//! operation; calling [`Tape::backward`] on a scalar replays adjoints in
//! reverse order. A tape is single-use: backward consumes it.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport, LeafReport};
pub use tape::{Tape, ValueId};

use thiserror::Error;

/// Errors from tensor construction, tape ops, and gradient checks.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("axis {axis} out of range for rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("backward requires a scalar, got {numel} elements")]
    NotScalar { numel: usize },
    #[error("tape already consumed by backward; record a fresh tape")]
    TapeConsumed,
    #[error("label {label} out of range [0, {classes}) at pixel (b={b}, h={h}, w={w})")]
    LabelOutOfRange { b: usize, h: usize, w: usize, label: u32, classes: usize },
    #[error("{0}")]
    InvalidArgument(String),
}

/// An n-dimensional `f64` array with an optional gradient of the same shape.
///
/// `DiffTensor` itself is plain data (`Send + Sync`); differentiability comes
/// from registering it on a [`Tape`] as a leaf. Tensors with
/// `requires_grad = false` act as constants when registered.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl DiffTensor {
    /// Build a constant tensor; fails unless `data.len()` equals the product
    /// of `shape` and every dimension is positive.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidArgument(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "DiffTensor::new",
                detail: format!("shape {shape:?} implies {numel} elements, data has {}", data.len()),
            });
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    /// Build a trainable tensor (`requires_grad = true`).
    pub fn with_grad(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let mut t = Self::new(shape, data)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Attach a gradient; must match the tensor's shape.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<(), TensorError> {
        if grad.len() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "set_grad",
                detail: format!("grad has {} elements, tensor has {}", grad.len(), self.data.len()),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_size_mismatch() {
        let err = DiffTensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn rejects_zero_dimension() {
        assert!(DiffTensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn grad_shape_enforced() {
        let mut t = DiffTensor::with_grad(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(t.set_grad(vec![0.0; 3]).is_err());
        t.set_grad(vec![0.5, 0.5]).unwrap();
        assert_eq!(t.grad().unwrap(), &[0.5, 0.5]);
        t.set_requires_grad(false);
        assert!(t.grad().is_none());
    }
}
