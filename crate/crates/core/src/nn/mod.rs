//! Layers with explicit forward/backward passes and the classification loss.
//!
//! Every layer caches what its backward pass needs during `forward`; the
//! cache is consumed by `backward`, so a second `backward` without a fresh
//! `forward` is an error. Parameter gradients accumulate until
//! [`Param::zero_grad`] is called.

mod batchnorm;
mod conv;
mod dense;
mod dropout;
mod loss;
mod pool;
mod shape;

pub use batchnorm::BatchNorm2d;
pub use conv::{conv2d_backward, conv2d_forward, Conv2d};
pub use dense::Dense;
pub use dropout::Dropout;
pub use loss::softmax_cross_entropy;
pub use pool::MaxPool2d;
pub use shape::{Flatten, Relu};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor and its same-shaped gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor4<T>,
    pub grad: Tensor4<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor4<T>) -> Self {
        let grad = Tensor4::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub(crate) fn accumulate(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.grad.len());
        for (g, &d) in self.grad.data_mut().iter_mut().zip(delta) {
            *g = T::from_f64(g.as_f64() + d);
        }
    }
}

pub trait Layer<T: Scalar> {
    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>>;

    /// Consumes the cached forward state; returns the gradient w.r.t. the input.
    fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>>;

    fn output_shape(&self, input: Shape4) -> Result<Shape4>;

    fn params(&self) -> Vec<&Param<T>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Vec::new()
    }

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// He-normal initialisation: `N(0, sqrt(2 / fan_in))`.
pub fn he_normal<T: Scalar>(shape: Shape4, fan_in: usize, rng: &mut Rng) -> Tensor4<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    Tensor4::from_fn(shape, |_| T::from_f64(rng.normal() * std))
}

pub(crate) fn missing_cache(layer: &str) -> Error {
    Error::contract(format!("{layer}: backward called without a cached forward"))
}

pub(crate) fn check_grad_shape(layer: &str, expected: Shape4, dy: Shape4) -> Result<()> {
    if expected != dy {
        return Err(Error::contract(format!(
            "{layer}: upstream gradient {dy:?} does not match output {expected:?}"
        )));
    }
    Ok(())
}
