use super::{global_avg_pool, hidden_width, sigmoid};
use crate::error::{Error, Result};
use crate::nn::{check_grad_shape, missing_cache, Dense, Layer, Mode, Param, Relu};
use crate::tensor::{Rng, Scalar, Shape4, Tensor4};

#[derive(Clone, Debug)]
struct SeCache<T> {
    x: Tensor4<T>,
    weights: Tensor4<T>,
}

/// Squeeze-and-Excitation: `s = σ(fc2(relu(fc1(GAP(x)))))`, `y = s ⊙ x`
/// with one weight per (sample, channel).
#[derive(Clone, Debug)]
pub struct SeBlock<T> {
    pub fc1: Dense<T>,
    pub fc2: Dense<T>,
    relu: Relu,
    cache: Option<SeCache<T>>,
}

impl<T: Scalar> SeBlock<T> {
    pub fn new(name: &str, channels: usize, reduction: usize, rng: &mut Rng) -> Self {
        let hidden = hidden_width(channels, reduction);
        Self::from_layers(
            Dense::new(&format!("{name}.fc1"), channels, hidden, rng),
            Dense::new(&format!("{name}.fc2"), hidden, channels, rng),
        )
    }

    pub fn from_layers(fc1: Dense<T>, fc2: Dense<T>) -> Self {
        Self {
            fc1,
            fc2,
            relu: Relu::new(),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.fc1.din()
    }

    pub fn hidden(&self) -> usize {
        self.fc1.dout()
    }

    /// Channel weights `[n, c, 1, 1]` from the most recent forward pass.
    pub fn channel_weights(&self) -> Option<&Tensor4<T>> {
        self.cache.as_ref().map(|c| &c.weights)
    }

    fn check_input(&self, shape: Shape4) -> Result<()> {
        if shape[1] != self.channels() {
            return Err(Error::contract(format!(
                "se_block: expected {} channels, got {shape:?}",
                self.channels()
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> Layer<T> for SeBlock<T> {
    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        self.check_input(x.shape())?;
        let squeezed = global_avg_pool(x);
        let hidden = self.fc1.forward(&squeezed, mode)?;
        let hidden = self.relu.forward(&hidden, mode)?;
        let logits = self.fc2.forward(&hidden, mode)?;
        let weights = logits.map(|v| T::from_f64(sigmoid(v.as_f64())));
        let y = Tensor4::from_fn(x.shape(), |[i, j, yy, xx]| x[[i, j, yy, xx]] * weights[[i, j, 0, 0]]);
        self.cache = Some(SeCache { x: x.clone(), weights });
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let SeCache { x, weights } = self.cache.take().ok_or_else(|| missing_cache("se_block"))?;
        check_grad_shape("se_block", x.shape(), dy.shape())?;
        let [n, c, h, w] = x.shape();

        // Scale path.
        let mut dx = Tensor4::zeros(x.shape());
        let mut dlogits = Tensor4::zeros([n, c, 1, 1]);
        for i in 0..n {
            for j in 0..c {
                let s = weights[[i, j, 0, 0]].as_f64();
                let mut ds = 0.0;
                for ((d, &g), &xv) in dx.plane_mut(i, j).iter_mut().zip(dy.plane(i, j)).zip(x.plane(i, j)) {
                    ds += g.as_f64() * xv.as_f64();
                    *d = T::from_f64(g.as_f64() * s);
                }
                dlogits[[i, j, 0, 0]] = T::from_f64(ds * s * (1.0 - s));
            }
        }

        // Squeeze path.
        let dhidden = self.fc2.backward(&dlogits)?;
        let dhidden = self.relu.backward(&dhidden)?;
        let dsqueezed = self.fc1.backward(&dhidden)?;
        let area = (h * w) as f64;
        for i in 0..n {
            for j in 0..c {
                let g = dsqueezed[[i, j, 0, 0]].as_f64() / area;
                for d in dx.plane_mut(i, j) {
                    *d = T::from_f64(d.as_f64() + g);
                }
            }
        }
        Ok(dx)
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        self.check_input(input)?;
        Ok(input)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.fc1.params_mut();
        p.extend(self.fc2.params_mut());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hidden_width_uses_reduction_two() {
        let mut rng = Rng::new(0);
        let se = SeBlock::<f32>::new("se", 5, 2, &mut rng);
        assert_eq!(se.hidden(), 2);
        let se = SeBlock::<f32>::new("se", 1, 2, &mut rng);
        assert_eq!(se.hidden(), 1);
    }

    #[test]
    fn hand_computed_two_channel_example() {
        let fc1 = Dense::from_params("fc1", Tensor4::full([2, 1, 1, 1], 1.0), vec![0.0]);
        let fc2 = Dense::from_params("fc2", Tensor4::full([1, 2, 1, 1], 1.0), vec![0.0, 0.0]);
        let mut se = SeBlock::<f64>::from_layers(fc1, fc2);
        let x = Tensor4::from_vec([1, 2, 1, 1], vec![3.0, 5.0]).unwrap();
        let y = se.forward(&x, Mode::Eval).unwrap();
        let s8 = 1.0 / (1.0 + (-8.0f64).exp());
        assert!((y.data()[0] - 3.0 * s8).abs() < 1e-12);
        assert!((y.data()[1] - 5.0 * s8).abs() < 1e-12);
    }

    #[test]
    fn identical_channels_get_identical_weights_in_unit_interval() {
        let mut rng = Rng::new(4);
        let mut se = SeBlock::<f64>::new("se", 5, 2, &mut rng);
        // Identical channels only give equal weights if the MLP treats them
        // symmetrically, so make fc2 columns equal.
        let hidden = se.hidden();
        let col: Vec<f64> = (0..hidden).map(|_| rng.normal()).collect();
        se.fc2.weight.value = Tensor4::from_fn([hidden, 5, 1, 1], |[k, _, _, _]| col[k]);
        let plane: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let x = Tensor4::from_fn([2, 5, 4, 4], |[_, _, y, x]| plane[y * 4 + x]);
        let y = se.forward(&x, Mode::Eval).unwrap();
        let s = se.channel_weights().unwrap();
        for i in 0..2 {
            for j in 0..5 {
                let v = s[[i, j, 0, 0]];
                assert!(v > 0.0 && v < 1.0);
                assert_eq!(v, s[[i, 0, 0, 0]]);
                for (a, b) in y.plane(i, j).iter().zip(x.plane(i, j)) {
                    assert_eq!(*a, b * v);
                }
            }
        }
    }

    #[test]
    fn zero_input_with_zero_biases_gives_half_weights_and_zero_output() {
        let mut rng = Rng::new(6);
        let mut se = SeBlock::<f64>::new("se", 5, 2, &mut rng);
        let y = se.forward(&Tensor4::zeros([1, 5, 3, 3]), Mode::Eval).unwrap();
        assert!(se.channel_weights().unwrap().data().iter().all(|&v| v == 0.5));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weights_depend_only_on_channel_means_for_constant_channels() {
        let mut rng = Rng::new(7);
        let mut se = SeBlock::<f64>::new("se", 3, 2, &mut rng);
        let means = [0.5, -1.25, 2.25];
        let small = Tensor4::from_fn([1, 3, 2, 2], |[_, j, _, _]| means[j]);
        let large = Tensor4::from_fn([1, 3, 9, 5], |[_, j, _, _]| means[j]);
        se.forward(&small, Mode::Eval).unwrap();
        let a = se.channel_weights().unwrap().clone();
        se.forward(&large, Mode::Eval).unwrap();
        assert_eq!(&a, se.channel_weights().unwrap());
    }
}
