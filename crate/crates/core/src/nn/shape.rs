use super::{check_grad_shape, missing_cache, Layer, Mode};
use crate::error::Result;
use crate::tensor::{Scalar, Shape4, Tensor4};

/// `y = max(x, 0)`; the subgradient at exactly 0 is 0.
#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Option<(Shape4, Vec<bool>)>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Scalar> Layer<T> for Relu {
    fn forward(&mut self, x: &Tensor4<T>, _mode: Mode) -> Result<Tensor4<T>> {
        let mask: Vec<bool> = x.data().iter().map(|&v| v > T::zero()).collect();
        let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.mask = Some((x.shape(), mask));
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (shape, mask) = self.mask.take().ok_or_else(|| missing_cache("relu"))?;
        check_grad_shape("relu", shape, dy.shape())?;
        let data = dy
            .data()
            .iter()
            .zip(&mask)
            .map(|(&g, &on)| if on { g } else { T::zero() })
            .collect();
        Tensor4::from_vec(shape, data)
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        Ok(input)
    }
}

/// Row-major reshape `[n, c, h, w] → [n, c·h·w, 1, 1]`.
#[derive(Clone, Debug, Default)]
pub struct Flatten {
    input_shape: Option<Shape4>,
}

impl Flatten {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn unflatten<T: Scalar>(x: Tensor4<T>, shape: Shape4) -> Result<Tensor4<T>> {
        x.reshape(shape)
    }
}

impl<T: Scalar> Layer<T> for Flatten {
    fn forward(&mut self, x: &Tensor4<T>, _mode: Mode) -> Result<Tensor4<T>> {
        self.input_shape = Some(x.shape());
        x.clone().reshape([x.n(), x.sample_len(), 1, 1])
    }

    fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let shape = self.input_shape.take().ok_or_else(|| missing_cache("flatten"))?;
        check_grad_shape("flatten", [shape[0], shape[1] * shape[2] * shape[3], 1, 1], dy.shape())?;
        dy.clone().reshape(shape)
    }

    fn output_shape(&self, [n, c, h, w]: Shape4) -> Result<Shape4> {
        Ok([n, c * h * w, 1, 1])
    }
}
