//! Dense f64 tensor engine with reverse-mode gradients.
//!
//! Tensors are flat row-major `Vec<f64>` buffers tagged with a [`Shape`].
//! Forward operations are recorded on a [`Tape`]; calling [`Tape::backward`]
//! on a scalar loss replays the recorded operations in reverse and
//! accumulates gradients into every `requires_grad` ancestor. A
//! finite-difference checker lives in [`gradcheck`].

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, grad_check_multi, GradCheckOptions, GradCheckReport};
pub use tape::{Tape, TensorId};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("zero extent in shape {dims:?}")]
    ZeroExtent { dims: Vec<usize> },
    #[error("value buffer of length {len} does not fit shape {shape:?} ({expected} elements)")]
    LengthMismatch {
        len: usize,
        shape: Vec<usize>,
        expected: usize,
    },
    #[error("axis {axis} out of range for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("gather index {index} out of bounds for source of {len} elements")]
    GatherOutOfBounds { index: usize, len: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
    #[error("eps must be positive, got {eps}")]
    NonPositiveEps { eps: f64 },
    #[error("concat needs at least one input")]
    EmptyConcat,
}

/// Ordered list of positive extents; element count is their product.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: Vec<usize>) -> Result<Self, TensorError> {
        if dims.contains(&0) {
            return Err(TensorError::ZeroExtent { dims });
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Extent of the last axis.
    pub fn last(&self) -> usize {
        *self.0.last().expect("shape has at least one axis")
    }
}

impl From<&[usize]> for Shape {
    fn from(dims: &[usize]) -> Self {
        Shape::new(dims.to_vec()).expect("nonzero extents")
    }
}

/// Dense row-major f64 tensor, optionally carrying a gradient buffer of the
/// same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    values: Vec<f64>,
    pub requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self, TensorError> {
        let shape = Shape::new(dims)?;
        if values.len() != shape.numel() {
            return Err(TensorError::LengthMismatch {
                len: values.len(),
                expected: shape.numel(),
                shape: shape.dims().to_vec(),
            });
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let shape = Shape::new(dims).expect("nonzero extents");
        let n = shape.numel();
        Tensor {
            shape,
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v]).expect("scalar")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.values.len());
        self.grad = Some(grad);
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.values[0]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
