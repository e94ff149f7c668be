//! Dense NCHW tensors and the numeric kernels the layers are built on.
//!
//! Storage is generic over [`Scalar`] so the same layer code runs in 32-bit
//! precision for training and in 64-bit precision for gradient checks.
//! Reductions and matrix products always accumulate in `f64`.

mod im2col;
pub(crate) mod matrix;
mod resize;
mod rng;

pub use im2col::{col2im, col2im_sample, im2col, im2col_sample};
pub use matrix::{matmul, matmul_a_bt, matmul_at_b, Matrix};
pub use resize::resize_bilinear;
pub use rng::Rng;

use std::fmt::{Debug, Display};
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Floating-point storage type of a tensor.
pub trait Scalar: num_traits::Float + Default + Debug + Display + Send + Sync + 'static {
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const BYTES: usize = 4;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Extents `[n, c, h, w]`.
pub type Shape4 = [usize; 4];

/// Dense 4-D array in row-major NCHW order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T = f32> {
    shape: Shape4,
    data: Vec<T>,
}

fn volume(shape: Shape4) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape4, value: T) -> Self {
        Self {
            shape,
            data: vec![value; volume(shape)],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if data.len() != volume(shape) {
            return Err(Error::contract(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(volume(shape));
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([i, j, y, x]));
                    }
                }
            }
        }
        Self { shape, data }
    }

    /// Per-channel vector stored as `[1, c, 1, 1]`.
    pub fn channel_vector(values: &[T]) -> Self {
        Self {
            shape: [1, values.len(), 1, 1],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Elements per sample (`c·h·w`).
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, y: usize, x: usize) -> usize {
        let [_, c, h, w] = self.shape;
        ((i * c + j) * h + y) * w + x
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let len = self.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    /// Spatial plane `(i, j)` as a contiguous `h·w` slice.
    pub fn plane(&self, i: usize, j: usize) -> &[T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (i * self.shape[1] + j) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, i: usize, j: usize) -> &mut [T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (i * self.shape[1] + j) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn reshape(self, shape: Shape4) -> Result<Self> {
        if volume(shape) != self.data.len() {
            return Err(Error::contract(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Self { shape, data: self.data })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    fn check_same(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::contract(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    fn zip(&self, other: &Self, op: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if other.shape == [1, self.c(), 1, 1] && self.shape != other.shape {
            let hw = self.h() * self.w();
            let c = self.c();
            let data = self
                .data
                .iter()
                .enumerate()
                .map(|(idx, &v)| f(v, other.data[(idx / hw) % c]))
                .collect();
            return Ok(Self {
                shape: self.shape,
                data,
            });
        }
        self.check_same(other, op)?;
        Ok(Self {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Elementwise sum; `other` may also be a `[1, c, 1, 1]` channel vector.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    /// Elementwise product; `other` may also be a `[1, c, 1, 1]` channel vector.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_same(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.as_f64().abs()))
    }

    /// Zero-pads both spatial axes by `p` on every side.
    pub fn pad_spatial(&self, p: usize) -> Self {
        let [n, c, h, w] = self.shape;
        let mut out = Self::zeros([n, c, h + 2 * p, w + 2 * p]);
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    let src = self.offset(i, j, y, 0);
                    let dst = out.offset(i, j, y + p, p);
                    out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
                }
            }
        }
        out
    }

    /// Inverse of [`Tensor4::pad_spatial`]: drops a border of width `p`.
    pub fn crop_spatial(&self, p: usize) -> Result<Self> {
        let [n, c, h, w] = self.shape;
        if h < 2 * p || w < 2 * p {
            return Err(Error::contract(format!("cannot crop {p} from {:?}", self.shape)));
        }
        let (oh, ow) = (h - 2 * p, w - 2 * p);
        let mut out = Self::zeros([n, c, oh, ow]);
        for i in 0..n {
            for j in 0..c {
                for y in 0..oh {
                    let src = self.offset(i, j, y + p, p);
                    let dst = out.offset(i, j, y, 0);
                    out.data[dst..dst + ow].copy_from_slice(&self.data[src..src + ow]);
                }
            }
        }
        Ok(out)
    }

    /// Per-channel mean and biased variance over batch and spatial axes.
    ///
    /// Uses Welford's update in `f64`.
    pub fn moments(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let [n, c, h, w] = self.shape;
        if n * h * w == 0 || c == 0 {
            return Err(Error::contract(format!("moments of empty tensor {:?}", self.shape)));
        }
        let mut means = Vec::with_capacity(c);
        let mut vars = Vec::with_capacity(c);
        for j in 0..c {
            let mut count = 0.0f64;
            let mut mean = 0.0f64;
            let mut m2 = 0.0f64;
            for i in 0..n {
                for &v in self.plane(i, j) {
                    let v = v.as_f64();
                    count += 1.0;
                    let delta = v - mean;
                    mean += delta / count;
                    m2 += delta * (v - mean);
                }
            }
            means.push(mean);
            vars.push(m2 / count);
        }
        Ok((means, vars))
    }
}

impl<T> Index<[usize; 4]> for Tensor4<T> {
    type Output = T;

    fn index(&self, [i, j, y, x]: [usize; 4]) -> &T {
        let [_, c, h, w] = self.shape;
        &self.data[((i * c + j) * h + y) * w + x]
    }
}

impl<T> IndexMut<[usize; 4]> for Tensor4<T> {
    fn index_mut(&mut self, [i, j, y, x]: [usize; 4]) -> &mut T {
        let [_, c, h, w] = self.shape;
        &mut self.data[((i * c + j) * h + y) * w + x]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: Shape4) -> Tensor4<f64> {
        let mut k = 0.0;
        Tensor4::from_fn(shape, |_| {
            k += 1.0;
            k
        })
    }

    #[test]
    fn offset_matches_row_major_layout() {
        let t = ramp([2, 3, 4, 5]);
        let mut expected = 0.0;
        for i in 0..2 {
            for j in 0..3 {
                for y in 0..4 {
                    for x in 0..5 {
                        expected += 1.0;
                        assert_eq!(t[[i, j, y, x]], expected);
                        assert_eq!(t.data()[t.offset(i, j, y, x)], expected);
                    }
                }
            }
        }
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(matches!(
            Tensor4::<f32>::from_vec([1, 2, 2, 2], vec![0.0; 7]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn additive_and_multiplicative_identities() {
        let x = ramp([2, 2, 3, 3]);
        assert_eq!(x.add(&Tensor4::zeros(x.shape())).unwrap(), x);
        assert_eq!(x.mul(&Tensor4::full(x.shape(), 1.0)).unwrap(), x);
    }

    #[test]
    fn per_channel_broadcast_scales_each_channel() {
        let x = Tensor4::<f64>::full([1, 2, 2, 2], 1.5);
        let y = x.mul(&Tensor4::channel_vector(&[2.0, 3.0])).unwrap();
        assert!(y.plane(0, 0).iter().all(|&v| v == 3.0));
        assert!(y.plane(0, 1).iter().all(|&v| v == 4.5));
    }

    #[test]
    fn incompatible_shapes_are_rejected() {
        let a = Tensor4::<f32>::zeros([1, 2, 2, 2]);
        let b = Tensor4::<f32>::zeros([1, 2, 2, 3]);
        assert!(a.add(&b).is_err());
        assert!(a.mul(&Tensor4::channel_vector(&[1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn moments_of_constant_and_two_point_inputs() {
        let (m, v) = Tensor4::<f32>::full([2, 1, 3, 3], 5.0).moments().unwrap();
        assert_eq!(m, vec![5.0]);
        assert_eq!(v, vec![0.0]);

        let t = Tensor4::<f64>::from_vec([1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        let (m, v) = t.moments().unwrap();
        assert_eq!(m, vec![1.0]);
        assert_eq!(v, vec![1.0]);
    }

    #[test]
    fn moments_match_two_pass_reference() {
        let mut rng = Rng::new(11);
        let t = Tensor4::<f64>::from_fn([2, 3, 4, 4], |_| rng.normal() * 3.0 + 1.0);
        let (m, v) = t.moments().unwrap();
        for j in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|i| t.plane(i, j).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(((m[j] - mean) / mean).abs() < 1e-6);
            assert!(((v[j] - var) / var).abs() < 1e-6);
        }
    }

    #[test]
    fn moments_reject_empty() {
        assert!(Tensor4::<f32>::zeros([0, 2, 2, 2]).moments().is_err());
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let x = ramp([2, 2, 3, 4]);
        let padded = x.pad_spatial(3);
        assert_eq!(padded.shape(), [2, 2, 9, 10]);
        assert_eq!(padded.sum(), x.sum());
        assert_eq!(padded.crop_spatial(3).unwrap(), x);
    }
}
