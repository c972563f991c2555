//! Dense f32 tensors and the reverse-mode autodiff engine built on them.
//!
//! Storage is always flat row-major f32. Reductions (matrix products, norms,
//! means) accumulate in f64 and round once on write, and every summation runs
//! in a fixed row-major order, so results are bit-identical across runs and
//! thread counts.

mod gradcheck;
mod optim;
mod params;
mod tape;

pub use gradcheck::grad_check;
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};

#[cfg(test)]
pub(crate) use tape::gelu_f64 as tape_gelu_f64;

use crate::error::{Error, Result};

/// Dense n-dimensional f32 array. `data.len()` always equals the product of
/// `shape`, and every dimension is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(data: Vec<f32>, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::InvalidParameter(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape)?;
        let numel = shape.iter().product();
        Ok(Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        })
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Result<Self> {
        let mut t = Tensor::zeros(shape)?;
        t.data.fill(value);
        Ok(t)
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Installs a gradient buffer. Length must match the tensor.
    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::InvalidParameter(format!(
                "gradient length {} does not match tensor numel {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Reinterprets the buffer under a new shape with the same numel.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::InvalidParameter(
            "tensor shape must have at least one dimension".into(),
        ));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidParameter(format!(
            "tensor shape {shape:?} contains a zero dimension"
        )));
    }
    Ok(())
}
