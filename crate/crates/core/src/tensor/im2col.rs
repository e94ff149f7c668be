//! Patch unrolling for GEMM convolution (no padding) and its adjoint.
//!
//! Row `(ch·k + ky)·k + kx` of the unrolled matrix holds input element
//! `(ch, oy·s + ky, ox·s + kx)` for every output position `(oy, ox)`.

use super::{Matrix, Scalar, Shape4, Tensor4};
use crate::error::{Error, Result};

fn output_extent(input: usize, kernel: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::contract("stride must be positive"));
    }
    if kernel == 0 || kernel > input {
        return Err(Error::contract(format!(
            "kernel {kernel} does not fit input extent {input}"
        )));
    }
    Ok((input - kernel) / stride + 1)
}

/// Unrolls one sample (`c·h·w` values) into a `(c·k·k) × (h_out·w_out)` matrix.
pub fn im2col_sample<T: Scalar>(sample: &[T], [c, h, w]: [usize; 3], k: usize, stride: usize) -> Result<Matrix<T>> {
    let oh = output_extent(h, k, stride)?;
    let ow = output_extent(w, k, stride)?;
    let cols = oh * ow;
    let mut out = vec![T::zero(); c * k * k * cols];
    for ch in 0..c {
        let plane = &sample[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let src_row = &plane[(oy * stride + ky) * w..];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        dst_row.copy_from_slice(&src_row[kx..kx + ow]);
                    } else {
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            *d = src_row[ox * stride + kx];
                        }
                    }
                }
            }
        }
    }
    Matrix::from_vec(c * k * k, cols, out)
}

/// Scatter-adds a `(c·k·k) × (h_out·w_out)` matrix back into a `c·h·w` sample.
pub fn col2im_sample<T: Scalar>(cols: &Matrix<T>, [c, h, w]: [usize; 3], k: usize, stride: usize) -> Result<Vec<T>> {
    let oh = output_extent(h, k, stride)?;
    let ow = output_extent(w, k, stride)?;
    if cols.rows() != c * k * k || cols.cols() != oh * ow {
        return Err(Error::contract(format!(
            "col2im: matrix {}x{} does not match image {c}x{h}x{w} with kernel {k}",
            cols.rows(),
            cols.cols()
        )));
    }
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let src = cols.row((ch * k + ky) * k + kx);
                for oy in 0..oh {
                    let dst_row = &mut plane[(oy * stride + ky) * w..];
                    for ox in 0..ow {
                        let d = &mut dst_row[ox * stride + kx];
                        *d = *d + src[oy * ow + ox];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Unrolls a whole batch into `(c·k·k) × (n·h_out·w_out)`; column
/// `(i·h_out + oy)·w_out + ox` is the patch of sample `i` at `(oy, ox)`.
pub fn im2col<T: Scalar>(x: &Tensor4<T>, k: usize, stride: usize) -> Result<Matrix<T>> {
    let [n, c, h, w] = x.shape();
    let oh = output_extent(h, k, stride)?;
    let ow = output_extent(w, k, stride)?;
    let per = oh * ow;
    let rows = c * k * k;
    let mut out = Matrix::zeros(rows, n * per);
    for i in 0..n {
        let m = im2col_sample(x.sample(i), [c, h, w], k, stride)?;
        for r in 0..rows {
            let dst = r * n * per + i * per;
            out.data_mut()[dst..dst + per].copy_from_slice(m.row(r));
        }
    }
    Ok(out)
}

/// Adjoint of [`im2col`].
pub fn col2im<T: Scalar>(cols: &Matrix<T>, shape: Shape4, k: usize, stride: usize) -> Result<Tensor4<T>> {
    let [n, c, h, w] = shape;
    let oh = output_extent(h, k, stride)?;
    let ow = output_extent(w, k, stride)?;
    let per = oh * ow;
    let rows = c * k * k;
    if cols.rows() != rows || cols.cols() != n * per {
        return Err(Error::contract(format!(
            "col2im: matrix {}x{} does not match {:?} with kernel {k}",
            cols.rows(),
            cols.cols(),
            shape
        )));
    }
    let mut out = Tensor4::zeros(shape);
    for i in 0..n {
        let mut part = Vec::with_capacity(rows * per);
        for r in 0..rows {
            let src = r * n * per + i * per;
            part.extend_from_slice(&cols.data()[src..src + per]);
        }
        let part = Matrix::from_vec(rows, per, part)?;
        let img = col2im_sample(&part, [c, h, w], k, stride)?;
        out.sample_mut(i).copy_from_slice(&img);
    }
    Ok(out)
}
