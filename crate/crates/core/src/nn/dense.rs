use super::{check_grad_shape, he_normal, missing_cache, Layer, Mode, Param};
use crate::error::{Error, Result};
use crate::tensor::matrix::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{Rng, Scalar, Shape4, Tensor4};

/// Fully connected layer `y = x·W + b`.
///
/// The input is read as an `n × din` matrix (any `[n, c, h, w]` with
/// `c·h·w = din`); the output has shape `[n, dout, 1, 1]`.
#[derive(Clone, Debug)]
pub struct Dense<T> {
    /// `[din, dout, 1, 1]`
    pub weight: Param<T>,
    /// `[1, dout, 1, 1]`
    pub bias: Param<T>,
    cache: Option<Tensor4<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(name: &str, din: usize, dout: usize, rng: &mut Rng) -> Self {
        Self::from_params(name, he_normal([din, dout, 1, 1], din, rng), vec![T::zero(); dout])
    }

    pub fn from_params(name: &str, weight: Tensor4<T>, bias: Vec<T>) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), Tensor4::channel_vector(&bias)),
            cache: None,
        }
    }

    pub fn din(&self) -> usize {
        self.weight.value.n()
    }

    pub fn dout(&self) -> usize {
        self.weight.value.c()
    }

    fn check_input(&self, shape: Shape4) -> Result<()> {
        let din = shape[1] * shape[2] * shape[3];
        if din != self.din() {
            return Err(Error::contract(format!(
                "dense: input {shape:?} has {din} features, weight expects {}",
                self.din()
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> Layer<T> for Dense<T> {
    fn forward(&mut self, x: &Tensor4<T>, _mode: Mode) -> Result<Tensor4<T>> {
        self.check_input(x.shape())?;
        let (n, din, dout) = (x.n(), self.din(), self.dout());
        let mut y = gemm_nn(x.data(), self.weight.value.data(), n, din, dout);
        for row in y.chunks_mut(dout) {
            for (v, &b) in row.iter_mut().zip(self.bias.value.data()) {
                *v = *v + b;
            }
        }
        self.cache = Some(x.clone());
        Tensor4::from_vec([n, dout, 1, 1], y)
    }

    fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let x = self.cache.take().ok_or_else(|| missing_cache("dense"))?;
        let (n, din, dout) = (x.n(), self.din(), self.dout());
        check_grad_shape("dense", [n, dout, 1, 1], dy.shape())?;

        let dw = gemm_tn(x.data(), dy.data(), n, din, dout);
        let dw: Vec<f64> = dw.iter().map(|v| v.as_f64()).collect();
        let mut db = vec![0.0; dout];
        for row in dy.data().chunks(dout) {
            for (acc, v) in db.iter_mut().zip(row) {
                *acc += v.as_f64();
            }
        }
        self.weight.accumulate(&dw);
        self.bias.accumulate(&db);

        let dx = gemm_nt(dy.data(), self.weight.value.data(), n, dout, din);
        Tensor4::from_vec(x.shape(), dx)
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        self.check_input(input)?;
        Ok([input[0], self.dout(), 1, 1])
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights_pass_input_through() {
        let mut w = Tensor4::<f64>::zeros([3, 3, 1, 1]);
        for i in 0..3 {
            w[[i, i, 0, 0]] = 1.0;
        }
        let mut dense = Dense::from_params("d", w, vec![0.0; 3]);
        let x = Tensor4::from_vec([2, 3, 1, 1], vec![1.0, -2.0, 3.0, 0.5, 0.25, -4.0]).unwrap();
        assert_eq!(dense.forward(&x, Mode::Eval).unwrap(), x);
    }

    #[test]
    fn head_produces_two_logits() {
        let mut rng = Rng::new(1);
        let mut dense = Dense::<f32>::new("head", 64, 2, &mut rng);
        let y = dense.forward(&Tensor4::full([4, 64, 1, 1], 0.1), Mode::Eval).unwrap();
        assert_eq!(y.shape(), [4, 2, 1, 1]);
    }

    #[test]
    fn accepts_unflattened_input_with_matching_features() {
        let mut rng = Rng::new(1);
        let mut dense = Dense::<f64>::new("d", 12, 2, &mut rng);
        assert!(dense.forward(&Tensor4::zeros([2, 3, 2, 2]), Mode::Eval).is_ok());
        assert!(matches!(
            dense.forward(&Tensor4::zeros([2, 5, 1, 1]), Mode::Eval),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn bias_gradient_sums_over_batch() {
        let mut rng = Rng::new(2);
        let mut dense = Dense::<f64>::new("d", 2, 2, &mut rng);
        dense.forward(&Tensor4::full([3, 2, 1, 1], 1.0), Mode::Train).unwrap();
        dense.backward(&Tensor4::full([3, 2, 1, 1], 0.5)).unwrap();
        assert_eq!(dense.bias.grad.data(), &[1.5, 1.5]);
    }
}
