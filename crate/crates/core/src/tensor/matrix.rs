use rayon::prelude::*;

use super::Scalar;
use crate::error::{Error, Result};

/// Row-major 2-D matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }
}

/// `a · b`.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::contract(format!(
            "matmul: inner extents differ ({} · {})",
            a.shape_str(),
            b.shape_str()
        )));
    }
    Ok(Matrix {
        rows: a.rows,
        cols: b.cols,
        data: gemm_nn(&a.data, &b.data, a.rows, a.cols, b.cols),
    })
}

/// `aᵀ · b`.
pub fn matmul_at_b<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(Error::contract(format!(
            "matmul_at_b: row counts differ ({}ᵀ · {})",
            a.shape_str(),
            b.shape_str()
        )));
    }
    Ok(Matrix {
        rows: a.cols,
        cols: b.cols,
        data: gemm_tn(&a.data, &b.data, a.rows, a.cols, b.cols),
    })
}

/// `a · bᵀ`.
pub fn matmul_a_bt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(Error::contract(format!(
            "matmul_a_bt: column counts differ ({} · {}ᵀ)",
            a.shape_str(),
            b.shape_str()
        )));
    }
    Ok(Matrix {
        rows: a.rows,
        cols: b.rows,
        data: gemm_nt(&a.data, &b.data, a.rows, a.cols, b.rows),
    })
}

// Minimum output rows per rayon task; below this the kernels stay sequential.
const PAR_ROWS: usize = 8;

/// `c[m×n] = a[m×k] · b[k×n]`, each output row accumulated in `f64`.
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    if n == 0 {
        return out;
    }
    let row = |(r, out_row): (usize, &mut [T])| {
        let mut acc = vec![0.0f64; n];
        let a_row = &a[r * k..(r + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let av = av.as_f64();
            let b_row = &b[kk * n..(kk + 1) * n];
            for (acc, &bv) in acc.iter_mut().zip(b_row) {
                *acc += av * bv.as_f64();
            }
        }
        for (o, v) in out_row.iter_mut().zip(acc) {
            *o = T::from_f64(v);
        }
    };
    if m >= PAR_ROWS && m * k * n > 1 << 16 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `c[m×n] = a[k×m]ᵀ · b[k×n]`.
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut acc = vec![0.0f64; m * n];
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for (r, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let av = av.as_f64();
            for (acc, &bv) in acc[r * n..(r + 1) * n].iter_mut().zip(b_row) {
                *acc += av * bv.as_f64();
            }
        }
    }
    acc.into_iter().map(T::from_f64).collect()
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`, computed as row-by-row dot products.
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    if n == 0 {
        return out;
    }
    let row = |(r, out_row): (usize, &mut [T])| {
        let a_row = &a[r * k..(r + 1) * k];
        for (s, o) in out_row.iter_mut().enumerate() {
            *o = T::from_f64(dot(a_row, &b[s * k..(s + 1) * k]));
        }
    };
    if m >= PAR_ROWS && m * k * n > 1 << 16 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// Dot product with four fixed `f64` lanes, combined in a fixed order.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            let idx = 4 * i + l;
            lanes[l] += a[idx].as_f64() * b[idx].as_f64();
        }
    }
    let mut tail = 0.0;
    for idx in 4 * chunks..a.len() {
        tail += a[idx].as_f64() * b[idx].as_f64();
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix<f64> {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    fn naive(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let mut c = Matrix::zeros(a.rows(), b.cols());
        for r in 0..a.rows() {
            for s in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(r, k) * b.get(k, s);
                }
                c.set(r, s, acc);
            }
        }
        c
    }

    #[test]
    fn identity_times_matrix() {
        let mut rng = Rng::new(1);
        let m = random(3, 4, &mut rng);
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn hand_computed_product() {
        let a = Matrix::<f32>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::<f32>::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn dimension_mismatch_names_both_shapes() {
        let a = Matrix::<f32>::zeros(2, 3);
        let b = Matrix::<f32>::zeros(2, 3);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("2x3 · 2x3"), "{err}");
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let mut rng = Rng::new(2);
        let a = random(7, 5, &mut rng);
        let b = random(5, 4, &mut rng);
        let reference = naive(&a, &b);
        let got32 = matmul(&a.cast(), &b.cast()).unwrap();
        let got64 = matmul(&a, &b).unwrap();
        for (i, &r) in reference.data().iter().enumerate() {
            assert!((got32.data()[i] as f64 - r).abs() < 1e-5);
            assert!((got64.data()[i] - r).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let mut rng = Rng::new(3);
        let a = random(6, 9, &mut rng);
        let b = random(6, 4, &mut rng);
        let c = random(5, 9, &mut rng);
        let tn = matmul_at_b(&a, &b).unwrap();
        let nt = matmul_a_bt(&a, &c).unwrap();
        let tn_ref = naive(&a.transpose(), &b);
        let nt_ref = naive(&a, &c.transpose());
        for (x, y) in tn.data().iter().zip(tn_ref.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in nt.data().iter().zip(nt_ref.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn large_product_uses_parallel_path_consistently() {
        let mut rng = Rng::new(4);
        let a = random(40, 70, &mut rng);
        let b = random(70, 50, &mut rng);
        let reference = naive(&a, &b);
        let got = matmul(&a, &b).unwrap();
        for (x, y) in got.data().iter().zip(reference.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    impl Matrix<f64> {
        fn cast(&self) -> Matrix<f32> {
            Matrix::from_vec(self.rows, self.cols, self.data.iter().map(|&v| v as f32).collect()).unwrap()
        }
    }
}
