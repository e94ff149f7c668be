use super::{check_grad_shape, missing_cache, Layer, Mode, Param};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
struct BnCache<T> {
    mode: Mode,
    xhat: Tensor4<T>,
    inv_std: Vec<f64>,
}

/// Per-channel batch normalisation over `(n, h, w)`.
///
/// Train: `x̂ = (x − μ_B)/√(σ²_B + ε)`, `y = γ·x̂ + β`, running statistics
/// updated as `r ← (1 − m)·r + m·stat` (unbiased variance stored).
/// Eval: normalises with the running statistics only.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor4<T>,
    pub running_var: Tensor4<T>,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor4::full([1, channels, 1, 1], T::one())),
            beta: Param::new(format!("{name}.beta"), Tensor4::zeros([1, channels, 1, 1])),
            running_mean: Tensor4::zeros([1, channels, 1, 1]),
            running_var: Tensor4::full([1, channels, 1, 1], T::one()),
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.c()
    }

    /// Pre-affine activations `x̂` from the most recent forward pass.
    pub fn normalized(&self) -> Option<&Tensor4<T>> {
        self.cache.as_ref().map(|c| &c.xhat)
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        if x.c() != self.channels() {
            return Err(Error::contract(format!(
                "batchnorm2d: expected {} channels, got {:?}",
                self.channels(),
                x.shape()
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> Layer<T> for BatchNorm2d<T> {
    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        self.check_input(x)?;
        let [n, c, h, w] = x.shape();
        let (mean, var) = match mode {
            Mode::Train => {
                let count = n * h * w;
                if count < 2 {
                    return Err(Error::contract(format!(
                        "batchnorm2d: train mode needs at least 2 values per channel, got {count}"
                    )));
                }
                let (mean, var) = x.moments()?;
                let m = self.momentum;
                let unbias = count as f64 / (count - 1) as f64;
                for j in 0..c {
                    let rm = &mut self.running_mean.data_mut()[j];
                    *rm = T::from_f64((1.0 - m) * rm.as_f64() + m * mean[j]);
                    let rv = &mut self.running_var.data_mut()[j];
                    *rv = T::from_f64((1.0 - m) * rv.as_f64() + m * var[j] * unbias);
                }
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.data().iter().map(|v| v.as_f64()).collect(),
                self.running_var.data().iter().map(|v| v.as_f64()).collect(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();

        let mut xhat = Tensor4::zeros(x.shape());
        let mut y = Tensor4::zeros(x.shape());
        for i in 0..n {
            for j in 0..c {
                let g = self.gamma.value.data()[j].as_f64();
                let b = self.beta.value.data()[j].as_f64();
                let (mu, is) = (mean[j], inv_std[j]);
                let src = x.plane(i, j);
                let xh = xhat.plane_mut(i, j);
                for (d, &s) in xh.iter_mut().zip(src) {
                    *d = T::from_f64((s.as_f64() - mu) * is);
                }
                let xh = xhat.plane(i, j).to_vec();
                for (d, s) in y.plane_mut(i, j).iter_mut().zip(xh) {
                    *d = T::from_f64(g * s.as_f64() + b);
                }
            }
        }
        self.cache = Some(BnCache { mode, xhat, inv_std });
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("batchnorm2d"))?;
        check_grad_shape("batchnorm2d", cache.xhat.shape(), dy.shape())?;
        let [n, c, h, w] = dy.shape();
        let count = (n * h * w) as f64;

        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for j in 0..c {
            for i in 0..n {
                for (&g, &xh) in dy.plane(i, j).iter().zip(cache.xhat.plane(i, j)) {
                    dbeta[j] += g.as_f64();
                    dgamma[j] += g.as_f64() * xh.as_f64();
                }
            }
        }

        let mut dx = Tensor4::zeros(dy.shape());
        for j in 0..c {
            let scale = self.gamma.value.data()[j].as_f64() * cache.inv_std[j];
            for i in 0..n {
                let xh = cache.xhat.plane(i, j);
                let g = dy.plane(i, j);
                let out = dx.plane_mut(i, j);
                match cache.mode {
                    Mode::Train => {
                        for ((d, &g), &xh) in out.iter_mut().zip(g).zip(xh) {
                            let v = count * g.as_f64() - dbeta[j] - xh.as_f64() * dgamma[j];
                            *d = T::from_f64(scale / count * v);
                        }
                    }
                    Mode::Eval => {
                        for (d, &g) in out.iter_mut().zip(g) {
                            *d = T::from_f64(scale * g.as_f64());
                        }
                    }
                }
            }
        }
        self.gamma.accumulate(&dgamma);
        self.beta.accumulate(&dbeta);
        Ok(dx)
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        if input[1] != self.channels() {
            return Err(Error::contract(format!(
                "batchnorm2d: expected {} channels, got {input:?}",
                self.channels()
            )));
        }
        Ok(input)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn constant_input_normalises_to_zero() {
        let mut bn = BatchNorm2d::<f32>::new("bn", 3);
        let y = bn.forward(&Tensor4::full([2, 3, 4, 4], 7.0), Mode::Train).unwrap();
        assert!(y.data().iter().all(|v| v.abs() <= 1e-3));
    }

    #[test]
    fn two_point_channel_standardises_to_unit_values() {
        let mut bn = BatchNorm2d::<f64>::new("bn", 1);
        bn.eps = 1e-300;
        let x = Tensor4::from_vec([1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12);
        assert!((y.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_value_channel_rejected_in_train_mode() {
        let mut bn = BatchNorm2d::<f32>::new("bn", 2);
        let x = Tensor4::zeros([1, 2, 1, 1]);
        assert!(matches!(bn.forward(&x, Mode::Train), Err(Error::Contract(_))));
        assert!(bn.forward(&x, Mode::Eval).is_ok());
    }

    #[test]
    fn running_stats_follow_ema_with_unbiased_variance() {
        let mut bn = BatchNorm2d::<f64>::new("bn", 1);
        let x = Tensor4::from_vec([1, 1, 1, 4], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        bn.forward(&x, Mode::Train).unwrap();
        // mean 3, biased var 3.5, unbiased 14/3.
        assert!((bn.running_mean.data()[0] - 0.3).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - (0.9 + 0.1 * 14.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn eval_output_ignores_batch_statistics() {
        let mut rng = Rng::new(5);
        let mut bn = BatchNorm2d::<f64>::new("bn", 2);
        bn.running_mean = Tensor4::channel_vector(&[0.5, -1.0]);
        bn.running_var = Tensor4::channel_vector(&[4.0, 0.25]);
        let x = Tensor4::from_fn([3, 2, 2, 2], |_| rng.normal());
        let y_full = bn.forward(&x, Mode::Eval).unwrap();
        let first = Tensor4::from_vec([1, 2, 2, 2], x.sample(0).to_vec()).unwrap();
        let y_one = bn.forward(&first, Mode::Eval).unwrap();
        assert_eq!(y_one.data(), y_full.sample(0));
        let expected = (x[[0, 0, 0, 0]] - 0.5) / (4.0f64 + 1e-5).sqrt();
        assert!((y_full[[0, 0, 0, 0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn train_mode_normalised_statistics() {
        let mut rng = Rng::new(9);
        let mut bn = BatchNorm2d::<f64>::new("bn", 3);
        let x = Tensor4::from_fn([4, 3, 5, 5], |[_, j, _, _]| rng.normal() * (j as f64 + 0.5) + j as f64);
        bn.forward(&x, Mode::Train).unwrap();
        let (m, v) = bn.normalized().unwrap().moments().unwrap();
        for j in 0..3 {
            assert!(m[j].abs() <= 1e-5);
            assert!((v[j] - 1.0).abs() <= 1e-3);
        }
    }
}
