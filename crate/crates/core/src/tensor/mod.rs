//! Dense f32 tensors with tape-based reverse-mode automatic differentiation.
//!
//! [`Tensor`] is an immutable row-major value. Differentiable computation is
//! recorded on a [`Tape`]: every primitive pushes a node holding its output and
//! a vector-Jacobian closure, so the node list is topologically ordered by
//! construction. [`Var`] is a cheap copyable handle into the tape, and
//! [`Tape::backward`] walks the nodes in reverse to produce [`Gradients`].
//!
//! Volumetric tensors use the `[C, D, H, W]` layout; displacement and velocity
//! fields store their three components (along D, H, W) as the channels.

mod conv;
mod elementwise;
mod field;
mod layout;
mod reduce;
mod sample;
mod tape;

pub use conv::conv3d_value;
pub use elementwise::LEAKY_RELU_SLOPE;
pub use layout::concat_channels;
pub use sample::{grid_sample_value, upsample2x_value};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// A dense row-major array of 32-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(
                "Tensor::new",
                format!(
                    "shape {shape:?} needs {expected} values, got {}",
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Spatial extents `[D, H, W]` of a `[C, D, H, W]` tensor.
    pub fn spatial(&self) -> Result<[usize; 3]> {
        match self.shape.as_slice() {
            &[_, d, h, w] => Ok([d, h, w]),
            other => Err(Error::dim(
                "spatial",
                format!("expected [C, D, H, W], got {other:?}"),
            )),
        }
    }

    pub fn channels(&self) -> Result<usize> {
        self.spatial()?;
        Ok(self.shape[0])
    }

    /// Contiguous slice of one channel of a `[C, D, H, W]` tensor.
    pub fn channel(&self, c: usize) -> &[f32] {
        let n: usize = self.shape[1..].iter().product();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

pub(crate) fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ExtentMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}
