//! Dense row-major `f32` tensors.
//!
//! A [`Tensor`] is a plain value: it carries its shape, data, and an optional
//! gradient buffer. Differentiation happens in [`crate::autograd::Graph`],
//! which copies tensors in as leaves and hands gradients back.

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(shape_err!("shape {shape:?} has a zero dimension"));
        }
        if numel(&shape) != data.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {} values, got {}",
                numel(&shape),
                data.len()
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(shape_err!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            ));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, &v)| *b += v),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Zeros the gradient buffer in place, keeping it allocated.
    pub fn zero_grad(&mut self) {
        if let Some(buf) = &mut self.grad {
            buf.fill(0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() || shape.contains(&0) {
            return Err(shape_err!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Surfaces NaN/Inf as an error naming `what`.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Bit-level equality of shape and values, ignoring gradients.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
