use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                rows * cols,
                data.len(),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Matrix {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("inner dim {}", self.cols),
                other.rows,
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(1.0, self.view(), other.view(), 0.0, &mut out);
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|a| *a = v);
    }

    /// Index of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Round every entry to the nearest `f32`, so the matrix survives a 32-bit
    /// serialization round trip bit-exactly.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn view(&self) -> MatView<'_> {
        MatView {
            data: &self.data,
            rows: self.rows,
            cols: self.cols,
            rs: self.cols as isize,
            cs: 1,
        }
    }

    /// Column block `[c0, c0 + width)` as a strided view.
    pub fn col_block(&self, c0: usize, width: usize) -> MatView<'_> {
        debug_assert!(c0 + width <= self.cols);
        MatView {
            data: &self.data[c0..],
            rows: self.rows,
            cols: width,
            rs: self.cols as isize,
            cs: 1,
        }
    }
}

/// Borrowed strided matrix view used to feed the gemm kernel without copies.
#[derive(Clone, Copy)]
pub struct MatView<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> MatView<'a> {
    pub fn t(self) -> MatView<'a> {
        MatView {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// `out = alpha · a · b + beta · out`.
pub fn gemm(alpha: f64, a: MatView<'_>, b: MatView<'_>, beta: f64, out: &mut Matrix) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimension");
    assert_eq!((m, n), out.shape(), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.scale(beta);
        return;
    }
    let cols = out.cols as isize;
    // SAFETY: the views were built from slices whose extents cover every
    // strided element touched for the given dimensions; `out` is exclusively
    // borrowed and has shape (m, n) with row stride `cols`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.data.as_mut_ptr(),
            cols,
            1,
        );
    }
}

/// Column block of a mutable matrix, written through by [`gemm_into_block`].
pub fn gemm_into_block(
    alpha: f64,
    a: MatView<'_>,
    b: MatView<'_>,
    beta: f64,
    out: &mut Matrix,
    c0: usize,
) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimension");
    assert_eq!(m, out.rows, "gemm output rows");
    assert!(c0 + n <= out.cols, "gemm output block");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let cols = out.cols as isize;
    // SAFETY: see `gemm`; the block starting at column c0 with n columns and
    // row stride `cols` stays inside `out.data`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.data.as_mut_ptr().add(c0),
            cols,
            1,
        );
    }
}

/// `a · x` for a row vector `x` (length `a.rows()`), i.e. `xᵀ A`.
pub fn vec_mat(x: &[f64], a: &Matrix, out: &mut [f64]) {
    debug_assert_eq!(x.len(), a.rows());
    debug_assert_eq!(out.len(), a.cols());
    out.iter_mut().for_each(|o| *o = 0.0);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, w) in out.iter_mut().zip(a.row(i)) {
            *o += xi * w;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn filled_seq(r: usize, c: usize, off: f64) -> Matrix {
        let data = (0..r * c).map(|i| ((i as f64) * 0.37 + off).sin()).collect();
        Matrix::from_vec(r, c, data).unwrap()
    }

    #[test]
    fn matmul_matches_naive() {
        let a = filled_seq(7, 5, 0.1);
        let b = filled_seq(5, 9, 0.7);
        let got = a.matmul(&b).unwrap();
        let want = naive(&a, &b);
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_views_match_explicit_transpose() {
        let a = filled_seq(6, 4, 0.3);
        let b = filled_seq(6, 3, 1.1);
        let mut out = Matrix::zeros(4, 3);
        gemm(1.0, a.view().t(), b.view(), 0.0, &mut out);
        let want = naive(&a.transpose(), &b);
        for (x, y) in out.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn column_blocks_address_the_right_entries() {
        let a = filled_seq(3, 8, 0.2);
        let b = filled_seq(2, 3, 0.9);
        // out[:, 4..6] = a[:, 2..5] · b^T
        let mut out = Matrix::zeros(3, 8);
        gemm_into_block(1.0, a.col_block(2, 3), b.view().t(), 0.0, &mut out, 4);
        for i in 0..3 {
            for j in 0..2 {
                let want: f64 = (0..3).map(|k| a.get(i, 2 + k) * b.get(j, k)).sum();
                assert!((out.get(i, 4 + j) - want).abs() < 1e-12);
            }
            assert_eq!(out.get(i, 0), 0.0);
            assert_eq!(out.get(i, 7), 0.0);
        }
    }

    #[test]
    fn shape_errors() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).is_err());
    }
}
