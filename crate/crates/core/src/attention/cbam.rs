use super::{global_avg_pool, global_max_pool, hidden_width, sigmoid};
use crate::error::{Error, Result};
use crate::nn::{check_grad_shape, missing_cache, Conv2d, Dense, Layer, Mode, Param, Relu};
use crate::tensor::{Rng, Scalar, Shape4, Tensor4};

pub const SPATIAL_KERNEL: usize = 7;
const SPATIAL_PAD: usize = SPATIAL_KERNEL / 2;

#[derive(Clone, Debug)]
struct CbamCache<T> {
    x: Tensor4<T>,
    channel_map: Tensor4<T>,
    max_pos: Vec<usize>,
    refined: Tensor4<T>,
    spatial_map: Tensor4<T>,
    max_channel: Vec<usize>,
}

/// Convolutional Block Attention Module.
///
/// Channel stage: `Mc = σ(MLP(GAP(x)) + MLP(GMP(x)))`, `x′ = Mc ⊙ x`.
/// Spatial stage: `Ms = σ(conv7×7([mean_c(x′); max_c(x′)]))` with zero
/// padding 3, `y = Ms ⊙ x′`.
#[derive(Clone, Debug)]
pub struct Cbam<T> {
    pub fc1: Dense<T>,
    pub fc2: Dense<T>,
    pub spatial: Conv2d<T>,
    relu: Relu,
    cache: Option<CbamCache<T>>,
}

impl<T: Scalar> Cbam<T> {
    pub fn new(name: &str, channels: usize, reduction: usize, rng: &mut Rng) -> Self {
        let hidden = hidden_width(channels, reduction);
        Self {
            fc1: Dense::new(&format!("{name}.fc1"), channels, hidden, rng),
            fc2: Dense::new(&format!("{name}.fc2"), hidden, channels, rng),
            spatial: Conv2d::new(&format!("{name}.spatial"), 2, 1, SPATIAL_KERNEL, rng),
            relu: Relu::new(),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.fc1.din()
    }

    /// `(Mc [n,c,1,1], Ms [n,1,h,w])` from the most recent forward pass.
    pub fn attention_maps(&self) -> Option<(&Tensor4<T>, &Tensor4<T>)> {
        self.cache.as_ref().map(|c| (&c.channel_map, &c.spatial_map))
    }

    fn check_input(&self, shape: Shape4) -> Result<()> {
        if shape[1] != self.channels() {
            return Err(Error::contract(format!(
                "cbam: expected {} channels, got {shape:?}",
                self.channels()
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> Layer<T> for Cbam<T> {
    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        self.check_input(x.shape())?;
        let [n, c, h, w] = x.shape();

        // Channel attention: both pooled descriptors go through the shared MLP
        // as one stacked batch of 2n rows.
        let avg = global_avg_pool(x);
        let (max, max_pos) = global_max_pool(x);
        let mut stacked = avg.into_vec();
        stacked.extend_from_slice(max.data());
        let stacked = Tensor4::from_vec([2 * n, c, 1, 1], stacked)?;
        let hidden = self.fc1.forward(&stacked, mode)?;
        let hidden = self.relu.forward(&hidden, mode)?;
        let out = self.fc2.forward(&hidden, mode)?;
        let channel_map = Tensor4::from_fn([n, c, 1, 1], |[i, j, _, _]| {
            let logit = out[[i, j, 0, 0]].as_f64() + out[[n + i, j, 0, 0]].as_f64();
            T::from_f64(sigmoid(logit))
        });
        let refined = scale_channels(x, &channel_map);

        // Spatial attention.
        let mut max_channel = Vec::with_capacity(n * h * w);
        let pooled = {
            let mut p = Tensor4::zeros([n, 2, h, w]);
            for i in 0..n {
                for pos in 0..h * w {
                    let mut sum = 0.0;
                    let mut best = 0;
                    for j in 0..c {
                        let v = refined.plane(i, j)[pos];
                        sum += v.as_f64();
                        if v > refined.plane(i, best)[pos] {
                            best = j;
                        }
                    }
                    p.plane_mut(i, 0)[pos] = T::from_f64(sum / c as f64);
                    p.plane_mut(i, 1)[pos] = refined.plane(i, best)[pos];
                    max_channel.push(best);
                }
            }
            p
        };
        let conv = self.spatial.forward(&pooled.pad_spatial(SPATIAL_PAD), mode)?;
        let spatial_map = conv.map(|v| T::from_f64(sigmoid(v.as_f64())));
        let y = Tensor4::from_fn(x.shape(), |[i, j, yy, xx]| {
            refined[[i, j, yy, xx]] * spatial_map[[i, 0, yy, xx]]
        });

        self.cache = Some(CbamCache {
            x: x.clone(),
            channel_map,
            max_pos,
            refined,
            spatial_map,
            max_channel,
        });
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("cbam"))?;
        check_grad_shape("cbam", cache.x.shape(), dy.shape())?;
        let [n, c, h, w] = dy.shape();
        let hw = h * w;

        // Spatial stage.
        let mut dconv = Tensor4::zeros([n, 1, h, w]);
        let mut drefined = vec![0.0f64; dy.len()];
        for i in 0..n {
            let ms = cache.spatial_map.plane(i, 0);
            let mut dms = vec![0.0f64; hw];
            for j in 0..c {
                let off = (i * c + j) * hw;
                for (pos, (&g, &r)) in dy.plane(i, j).iter().zip(cache.refined.plane(i, j)).enumerate() {
                    dms[pos] += g.as_f64() * r.as_f64();
                    drefined[off + pos] = g.as_f64() * ms[pos].as_f64();
                }
            }
            for (pos, d) in dconv.plane_mut(i, 0).iter_mut().enumerate() {
                let m = ms[pos].as_f64();
                *d = T::from_f64(dms[pos] * m * (1.0 - m));
            }
        }
        let dpooled = self.spatial.backward(&dconv)?.crop_spatial(SPATIAL_PAD)?;
        for i in 0..n {
            let dmean = dpooled.plane(i, 0);
            let dmax = dpooled.plane(i, 1);
            for pos in 0..hw {
                let g = dmean[pos].as_f64() / c as f64;
                for j in 0..c {
                    drefined[(i * c + j) * hw + pos] += g;
                }
                let j = cache.max_channel[i * hw + pos];
                drefined[(i * c + j) * hw + pos] += dmax[pos].as_f64();
            }
        }

        // Channel stage.
        let mut dx = vec![0.0f64; dy.len()];
        let mut dlogit = vec![0.0f64; n * c];
        for i in 0..n {
            for j in 0..c {
                let off = (i * c + j) * hw;
                let mc = cache.channel_map[[i, j, 0, 0]].as_f64();
                let mut dmc = 0.0;
                for (pos, &xv) in cache.x.plane(i, j).iter().enumerate() {
                    dmc += drefined[off + pos] * xv.as_f64();
                    dx[off + pos] = drefined[off + pos] * mc;
                }
                dlogit[i * c + j] = dmc * mc * (1.0 - mc);
            }
        }
        let dout: Vec<T> = dlogit.iter().chain(&dlogit).map(|&v| T::from_f64(v)).collect();
        let dout = Tensor4::from_vec([2 * n, c, 1, 1], dout)?;
        let dhidden = self.fc2.backward(&dout)?;
        let dhidden = self.relu.backward(&dhidden)?;
        let dstacked = self.fc1.backward(&dhidden)?;
        for i in 0..n {
            for j in 0..c {
                let off = (i * c + j) * hw;
                let davg = dstacked[[i, j, 0, 0]].as_f64() / hw as f64;
                for d in &mut dx[off..off + hw] {
                    *d += davg;
                }
                dx[off + cache.max_pos[i * c + j]] += dstacked[[n + i, j, 0, 0]].as_f64();
            }
        }
        Tensor4::from_vec(dy.shape(), dx.into_iter().map(T::from_f64).collect())
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        self.check_input(input)?;
        Ok(input)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p.extend(self.spatial.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.fc1.params_mut();
        p.extend(self.fc2.params_mut());
        p.extend(self.spatial.params_mut());
        p
    }
}

fn scale_channels<T: Scalar>(x: &Tensor4<T>, weights: &Tensor4<T>) -> Tensor4<T> {
    Tensor4::from_fn(x.shape(), |[i, j, yy, xx]| x[[i, j, yy, xx]] * weights[[i, j, 0, 0]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_shape_at_insertion_point() {
        let mut rng = Rng::new(1);
        let mut cbam = Cbam::<f32>::new("cbam", 5, 2, &mut rng);
        let x = Tensor4::from_fn([2, 5, 111, 111], |_| rng.uniform() as f32);
        let y = cbam.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), [2, 5, 111, 111]);
    }

    #[test]
    fn maps_lie_in_unit_interval_with_expected_shapes() {
        let mut rng = Rng::new(2);
        let mut cbam = Cbam::<f64>::new("cbam", 4, 2, &mut rng);
        let x = Tensor4::from_fn([3, 4, 6, 5], |_| rng.normal() * 4.0);
        cbam.forward(&x, Mode::Train).unwrap();
        let (mc, ms) = cbam.attention_maps().unwrap();
        assert_eq!(mc.shape(), [3, 4, 1, 1]);
        assert_eq!(ms.shape(), [3, 1, 6, 5]);
        assert!(mc.data().iter().chain(ms.data()).all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn spatially_constant_input_gives_uniform_spatial_map_in_the_interior() {
        let mut rng = Rng::new(3);
        let mut cbam = Cbam::<f64>::new("cbam", 3, 2, &mut rng);
        let levels = [0.3, 1.7, -0.4];
        let x = Tensor4::from_fn([1, 3, 16, 16], |[_, j, _, _]| levels[j]);
        cbam.forward(&x, Mode::Eval).unwrap();
        let (_, ms) = cbam.attention_maps().unwrap();
        // Zero padding makes the border see fewer taps; positions at least 3
        // away from every edge see the full constant window.
        let reference = ms[[0, 0, 3, 3]];
        for y in 3..13 {
            for x in 3..13 {
                assert!((ms[[0, 0, y, x]] - reference).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let mut rng = Rng::new(0);
        let mut cbam = Cbam::<f32>::new("cbam", 5, 2, &mut rng);
        assert!(cbam.forward(&Tensor4::zeros([1, 4, 8, 8]), Mode::Eval).is_err());
    }
}
