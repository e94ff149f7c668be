use super::{check_grad_shape, missing_cache, Layer, Mode};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

#[derive(Clone, Debug)]
struct PoolCache {
    input_shape: Shape4,
    argmax: Vec<usize>,
}

/// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
///
/// Ties go to the first element in row-major scan order, so the backward
/// pass routes each upstream gradient to exactly one input position.
#[derive(Clone, Debug, Default)]
pub struct MaxPool2d {
    cache: Option<PoolCache>,
}

impl MaxPool2d {
    pub fn new() -> Self {
        Self::default()
    }
}

fn pooled_shape([n, c, h, w]: Shape4) -> Result<Shape4> {
    if h < 2 || w < 2 {
        return Err(Error::contract(format!("maxpool2d needs h, w >= 2, got {h}x{w}")));
    }
    Ok([n, c, h / 2, w / 2])
}

impl<T: Scalar> Layer<T> for MaxPool2d {
    fn forward(&mut self, x: &Tensor4<T>, _mode: Mode) -> Result<Tensor4<T>> {
        let out_shape = pooled_shape(x.shape())?;
        let [n, c, oh, ow] = out_shape;
        let w = x.w();
        let mut y = Tensor4::zeros(out_shape);
        let mut argmax = Vec::with_capacity(y.len());
        let data = x.data();
        let mut k = 0;
        for i in 0..n {
            for j in 0..c {
                let base = x.offset(i, j, 0, 0);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let top = base + 2 * oy * w + 2 * ox;
                        let mut best = top;
                        for cand in [top + 1, top + w, top + w + 1] {
                            if data[cand] > data[best] {
                                best = cand;
                            }
                        }
                        y.data_mut()[k] = data[best];
                        argmax.push(best);
                        k += 1;
                    }
                }
            }
        }
        self.cache = Some(PoolCache {
            input_shape: x.shape(),
            argmax,
        });
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("maxpool2d"))?;
        check_grad_shape("maxpool2d", pooled_shape(cache.input_shape)?, dy.shape())?;
        let mut dx = Tensor4::zeros(cache.input_shape);
        for (&pos, &g) in cache.argmax.iter().zip(dy.data()) {
            let d = &mut dx.data_mut()[pos];
            *d = *d + g;
        }
        Ok(dx)
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        pooled_shape(input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_pooling_extents() {
        let pool = MaxPool2d::new();
        let out = <MaxPool2d as Layer<f32>>::output_shape(&pool, [1, 5, 222, 222]).unwrap();
        assert_eq!(out, [1, 5, 111, 111]);
        let out = <MaxPool2d as Layer<f32>>::output_shape(&pool, [1, 11, 109, 109]).unwrap();
        assert_eq!(out, [1, 11, 54, 54]);
    }

    #[test]
    fn block_max_and_gradient_routing() {
        let mut pool = MaxPool2d::new();
        let x = Tensor4::<f64>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pool.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let dx = pool.backward(&Tensor4::full([1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn ties_go_to_first_in_scan_order() {
        let mut pool = MaxPool2d::new();
        let x = Tensor4::<f64>::from_vec([1, 1, 2, 2], vec![1.0, 5.0, 5.0, 5.0]).unwrap();
        pool.forward(&x, Mode::Train).unwrap();
        let dx = pool.backward(&Tensor4::full([1, 1, 1, 1], 2.0)).unwrap();
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn odd_extent_drops_trailing_row_and_column() {
        let mut pool = MaxPool2d::new();
        let x = Tensor4::<f64>::from_fn([1, 1, 3, 3], |[_, _, y, x]| (y * 3 + x) as f64);
        let y = pool.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn too_small_input_is_rejected() {
        let mut pool = MaxPool2d::new();
        assert!(pool.forward(&Tensor4::<f32>::zeros([1, 1, 1, 4]), Mode::Train).is_err());
    }
}
