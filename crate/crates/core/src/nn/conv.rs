use rayon::prelude::*;

use super::{check_grad_shape, he_normal, missing_cache, Layer, Mode, Param};
use crate::error::{Error, Result};
use crate::tensor::matrix::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{col2im_sample, im2col_sample, Rng, Scalar, Shape4, Tensor4};

fn check_conv_shapes(x: Shape4, w: Shape4) -> Result<()> {
    let [_, cin, h, wd] = x;
    let [_, wcin, k, k2] = w;
    if k != k2 {
        return Err(Error::contract(format!("non-square kernel {w:?}")));
    }
    if cin != wcin {
        return Err(Error::contract(format!(
            "conv2d: input has {cin} channels but weight {w:?} expects {wcin}"
        )));
    }
    if k > h || k > wd {
        return Err(Error::contract(format!(
            "conv2d: kernel {k} larger than input {h}x{wd}"
        )));
    }
    Ok(())
}

/// Valid (unpadded, stride-1) convolution `y = W ⊛ x + b` via im2col + GEMM.
pub fn conv2d_forward<T: Scalar>(x: &Tensor4<T>, weight: &Tensor4<T>, bias: &[T]) -> Result<Tensor4<T>> {
    check_conv_shapes(x.shape(), weight.shape())?;
    let [n, cin, h, w] = x.shape();
    let [cout, _, k, _] = weight.shape();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let ckk = cin * k * k;
    let per = oh * ow;

    let mut out = Tensor4::zeros([n, cout, oh, ow]);
    out.data_mut()
        .par_chunks_mut(cout * per)
        .enumerate()
        .try_for_each(|(i, dst)| -> Result<()> {
            let cols = im2col_sample(x.sample(i), [cin, h, w], k, 1)?;
            let y = gemm_nn(weight.data(), cols.data(), cout, ckk, per);
            for (o, (d, s)) in dst.chunks_mut(per).zip(y.chunks(per)).enumerate() {
                let b = bias[o];
                for (d, &s) in d.iter_mut().zip(s) {
                    *d = s + b;
                }
            }
            Ok(())
        })?;
    Ok(out)
}

/// Gradients of [`conv2d_forward`]: `(dX, dW, db)`, with `dW`/`db` summed over the batch.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    dy: &Tensor4<T>,
) -> Result<(Tensor4<T>, Vec<f64>, Vec<f64>)> {
    check_conv_shapes(x.shape(), weight.shape())?;
    let [n, cin, h, w] = x.shape();
    let [cout, _, k, _] = weight.shape();
    let (oh, ow) = (h - k + 1, w - k + 1);
    check_grad_shape("conv2d", [n, cout, oh, ow], dy.shape())?;
    let ckk = cin * k * k;
    let per = oh * ow;

    let per_sample: Vec<(Vec<T>, Vec<T>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let cols = im2col_sample(x.sample(i), [cin, h, w], k, 1)?;
            let dy_i = dy.sample(i);
            let dw = gemm_nt(dy_i, cols.data(), cout, per, ckk);
            let db = dy_i
                .chunks(per)
                .map(|row| row.iter().map(|v| v.as_f64()).sum())
                .collect();
            let dcols = gemm_tn(weight.data(), dy_i, cout, ckk, per);
            let dcols = crate::tensor::Matrix::from_vec(ckk, per, dcols)?;
            let dx = col2im_sample(&dcols, [cin, h, w], k, 1)?;
            Ok((dx, dw, db))
        })
        .collect::<Result<_>>()?;

    let mut dx = Tensor4::zeros(x.shape());
    let mut dw = vec![0.0f64; cout * ckk];
    let mut db = vec![0.0f64; cout];
    for (i, (dx_i, dw_i, db_i)) in per_sample.into_iter().enumerate() {
        dx.sample_mut(i).copy_from_slice(&dx_i);
        for (a, b) in dw.iter_mut().zip(dw_i) {
            *a += b.as_f64();
        }
        for (a, b) in db.iter_mut().zip(db_i) {
            *a += b;
        }
    }
    Ok((dx, dw, db))
}

/// 2-D convolution layer, square kernel, no padding, stride 1.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor4<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// He-initialised weights, zero bias.
    pub fn new(name: &str, cin: usize, cout: usize, kernel: usize, rng: &mut Rng) -> Self {
        let weight = he_normal([cout, cin, kernel, kernel], cin * kernel * kernel, rng);
        Self::from_params(name, weight, vec![T::zero(); cout])
    }

    pub fn from_params(name: &str, weight: Tensor4<T>, bias: Vec<T>) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), Tensor4::channel_vector(&bias)),
            cache: None,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.h()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.n()
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor4<T>, _mode: Mode) -> Result<Tensor4<T>> {
        let y = conv2d_forward(x, &self.weight.value, self.bias.value.data())?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let x = self.cache.take().ok_or_else(|| missing_cache("conv2d"))?;
        let (dx, dw, db) = conv2d_backward(&x, &self.weight.value, dy)?;
        self.weight.accumulate(&dw);
        self.bias.accumulate(&db);
        Ok(dx)
    }

    fn output_shape(&self, [n, c, h, w]: Shape4) -> Result<Shape4> {
        check_conv_shapes([n, c, h, w], self.weight.value.shape())?;
        let k = self.kernel();
        Ok([n, self.out_channels(), h - k + 1, w - k + 1])
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
    fn paper_first_stage_dimensions() {
        let mut rng = Rng::new(0);
        let conv = Conv2d::<f32>::new("conv1", 3, 5, 3, &mut rng);
        assert_eq!(conv.output_shape([1, 3, 224, 224]).unwrap(), [1, 5, 222, 222]);
        let y = Conv2d::<f32>::new("c", 3, 5, 3, &mut rng)
            .forward(&Tensor4::full([1, 3, 224, 224], 0.5), Mode::Eval)
            .unwrap();
        assert_eq!(y.shape(), [1, 5, 222, 222]);
    }

    #[test]
    fn delta_kernel_crops_interior() {
        let mut w = Tensor4::<f64>::zeros([1, 1, 3, 3]);
        w[[0, 0, 1, 1]] = 1.0;
        let mut conv = Conv2d::from_params("c", w, vec![0.0]);
        let x = Tensor4::from_fn([1, 1, 5, 6], |[_, _, y, x]| (y * 6 + x) as f64);
        let y = conv.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), [1, 1, 3, 4]);
        for oy in 0..3 {
            for ox in 0..4 {
                assert_eq!(y[[0, 0, oy, ox]], x[[0, 0, oy + 1, ox + 1]]);
            }
        }
    }

    #[test]
    fn all_ones_kernel_sums_windows() {
        let mut rng = Rng::new(3);
        let x = Tensor4::<f64>::from_fn([1, 1, 4, 4], |_| rng.normal());
        let mut conv = Conv2d::from_params("c", Tensor4::full([1, 1, 3, 3], 1.0), vec![0.0]);
        let y = conv.forward(&x, Mode::Train).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut s = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        s += x[[0, 0, oy + ky, ox + kx]];
                    }
                }
                assert!((y[[0, 0, oy, ox]] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut rng = Rng::new(0);
        let mut conv = Conv2d::<f32>::new("c", 3, 2, 3, &mut rng);
        let err = conv.forward(&Tensor4::zeros([1, 2, 5, 5]), Mode::Train);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn linear_in_input_without_bias() {
        let mut rng = Rng::new(4);
        let mut conv = Conv2d::<f32>::new("c", 2, 3, 3, &mut rng);
        let x1 = Tensor4::<f32>::from_fn([2, 2, 7, 6], |_| rng.normal() as f32);
        let x2 = Tensor4::<f32>::from_fn([2, 2, 7, 6], |_| rng.normal() as f32);
        let (a, b) = (1.7f32, -0.6f32);
        let mixed = x1.scale(a).add(&x2.scale(b)).unwrap();
        let lhs = conv.forward(&mixed, Mode::Eval).unwrap();
        let y1 = conv.forward(&x1, Mode::Eval).unwrap();
        let y2 = conv.forward(&x2, Mode::Eval).unwrap();
        let rhs = y1.scale(a).add(&y2.scale(b)).unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - r).abs() <= 1e-4);
        }
    }

    #[test]
    fn backward_without_forward_is_an_error() {
        let mut rng = Rng::new(0);
        let mut conv = Conv2d::<f64>::new("c", 1, 1, 3, &mut rng);
        assert!(conv.backward(&Tensor4::zeros([1, 1, 1, 1])).is_err());
        let x = Tensor4::zeros([1, 1, 3, 3]);
        conv.forward(&x, Mode::Train).unwrap();
        conv.backward(&Tensor4::zeros([1, 1, 1, 1])).unwrap();
        assert!(conv.backward(&Tensor4::zeros([1, 1, 1, 1])).is_err());
    }
}
