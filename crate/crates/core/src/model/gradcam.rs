use super::{ExpressionNet, Stage};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::{resize_bilinear, Scalar, Tensor4};

/// Side length of every Grad-CAM heatmap.
pub const GRADCAM_SIZE: usize = 224;

/// Square row-major heatmap with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub size: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.size + x]
    }

    /// `(y, x)` of the largest value (first in scan order on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (k, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = k;
            }
        }
        (best / self.size, best % self.size)
    }
}

impl<T: Scalar> ExpressionNet<T> {
    /// Grad-CAM for `target_class` on a single image `[1, 3, s, s]`.
    ///
    /// Uses the post-ReLU maps `A` of the second conv stage:
    /// `α_k = mean(∂logit_target/∂A_k)`, `map = relu(Σ_k α_k A_k)`,
    /// bilinearly resized to 224×224 and divided by its maximum. The network
    /// itself is untouched; gradients go to a private copy.
    pub fn grad_cam(&self, image: &Tensor4<T>, target_class: usize) -> Result<Heatmap> {
        if target_class >= self.config.num_classes {
            return Err(Error::contract(format!(
                "grad_cam: target class {target_class} out of range"
            )));
        }
        if image.n() != 1 {
            return Err(Error::contract(format!(
                "grad_cam: expected a single image, got {:?}",
                image.shape()
            )));
        }
        self.check_input(image.shape())?;

        let mut net = self.clone();
        let mut h = image.clone();
        let mut activations = None;
        for (k, stage) in net.stages.iter_mut().enumerate() {
            h = stage.layer_mut().forward(&h, Mode::Eval)?;
            if k == net.cam_stage {
                activations = Some(h.clone());
            }
        }
        let a = activations.expect("cam stage is inside the network");

        let mut g = Tensor4::zeros(h.shape());
        g[[0, target_class, 0, 0]] = T::one();
        for stage in net.stages[net.cam_stage + 1..].iter_mut().rev() {
            g = stage.layer_mut().backward(&g)?;
        }

        let [_, c, mh, mw] = a.shape();
        let mut raw = vec![0.0f64; mh * mw];
        for k in 0..c {
            let alpha = g.plane(0, k).iter().map(|v| v.as_f64()).sum::<f64>() / (mh * mw) as f64;
            for (r, v) in raw.iter_mut().zip(a.plane(0, k)) {
                *r += alpha * v.as_f64();
            }
        }
        for r in &mut raw {
            *r = r.max(0.0);
        }
        let mut values = resize_bilinear(&raw, mh, mw, GRADCAM_SIZE, GRADCAM_SIZE);
        let max = values.iter().cloned().fold(0.0f64, f64::max);
        if max > 0.0 {
            for v in &mut values {
                *v = (*v / max).clamp(0.0, 1.0);
            }
        }
        Ok(Heatmap {
            size: GRADCAM_SIZE,
            values,
        })
    }

    /// Mutable access to the second convolution, e.g. for probing Grad-CAM.
    pub fn conv2_mut(&mut self) -> &mut crate::nn::Conv2d<T> {
        self.stages
            .iter_mut()
            .filter_map(|s| match s {
                Stage::Conv(c) => Some(c),
                _ => None,
            })
            .nth(1)
            .expect("the network has two convolutions")
    }
}

#[cfg(test)]
mod tests {
    use super::super::{experiment_configs, ModelConfig};
    use super::*;
    use crate::nn::Layer;
    use crate::tensor::Rng;

    fn net(index: usize, size: usize) -> ExpressionNet<f32> {
        let config = ModelConfig {
            input_size: size,
            dense_widths: [8, 4],
            ..experiment_configs()[index].config.clone()
        };
        ExpressionNet::new(config).unwrap()
    }

    #[test]
    fn heatmap_is_224_square_and_in_unit_range() {
        let mut rng = Rng::new(9);
        for (index, size) in [(0, 32), (6, 24), (7, 40)] {
            let net = net(index, size);
            let image = Tensor4::from_fn([1, 3, size, size], |_| rng.uniform() as f32);
            for class in 0..2 {
                let map = net.grad_cam(&image, class).unwrap();
                assert_eq!(map.values.len(), 224 * 224);
                assert!(map.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn constant_conv_stage_gives_uniform_heatmap() {
        let mut net = net(6, 32);
        let conv2 = net.conv2_mut();
        conv2.weight.value.fill(0.0);
        let channels = conv2.bias.value.len();
        for (k, b) in conv2.bias.value.data_mut().iter_mut().enumerate() {
            *b = 0.5 + k as f32 / channels as f32;
        }
        let mut rng = Rng::new(2);
        let image = Tensor4::from_fn([1, 3, 32, 32], |_| rng.uniform() as f32);
        let map = net.grad_cam(&image, 1).unwrap();
        let first = map.values[0];
        assert!(map.values.iter().all(|&v| v == first), "heatmap not uniform");
    }

    #[test]
    fn leaves_the_network_untouched() {
        let net = net(7, 24);
        let before = net.clone();
        let image = Tensor4::full([1, 3, 24, 24], 0.5);
        net.grad_cam(&image, 0).unwrap();
        for (a, b) in net.params().iter().zip(before.params()) {
            assert_eq!(a, &b);
        }
        assert!(net.grad_cam(&image, 2).is_err());
        assert!(net.grad_cam(&Tensor4::full([2, 3, 24, 24], 0.5), 0).is_err());
    }
}
