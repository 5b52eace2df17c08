//! Dense row-major matrices and the elementwise and reduction kernels used
//! throughout the adapters, normalization and training code.

mod svd;
mod text;

pub use svd::{svd, SvdResult, SVD_MAX_SWEEPS};
pub(crate) use text::numbered_lines;
pub use text::{parse_matrix, read_matrix, write_matrix};

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense matrix stored row-major. Both dimensions are at least one.
#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Empty("matrix dimensions must be positive"));
        }
        if data.len() != rows * cols {
            return Err(Error::shape("Matrix::new", (rows, cols), (data.len(), 1)));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
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

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from `f64` row literals. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        assert!(rows.iter().all(|r| r.as_ref().len() == cols), "ragged rows");
        Self::from_fn(rows.len(), cols, |i, j| T::lit(rows[i].as_ref()[j]))
    }

    pub fn diag(values: &[T]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
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
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == T::zero())
    }

    fn ensure_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    /// Standard matrix product `self · rhs`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::shape("matmul", self.shape(), rhs.shape()));
        }
        let (n, k, m) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == T::zero() {
                    continue;
                }
                let rhs_row = &rhs.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Self) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(Error::shape("t_matmul", self.shape(), rhs.shape()));
        }
        let (n, k, m) = (self.cols, self.rows, rhs.cols);
        let mut out = vec![T::zero(); n * m];
        for p in 0..k {
            let lhs_row = &self.data[p * n..(p + 1) * n];
            let rhs_row = &rhs.data[p * m..(p + 1) * m];
            for (i, &a) in lhs_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in out[i * m..(i + 1) * m].iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `self · rhsᵀ` without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.cols {
            return Err(Error::shape("matmul_t", self.shape(), rhs.shape()));
        }
        Ok(Self::from_fn(self.rows, rhs.rows, |i, j| {
            self.row(i)
                .iter()
                .zip(rhs.row(j))
                .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
        }))
    }

    /// Matrix-vector product.
    pub fn mul_vec(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.cols {
            return Err(Error::shape("mul_vec", self.shape(), (x.len(), 1)));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(x).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
            .collect())
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.ensure_same_shape(other, op)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "hadamard", |a, b| a * b)
    }

    /// Entrywise `self / other`, rejecting any denominator below the division floor.
    pub fn div_elem(&self, other: &Self) -> Result<Self> {
        self.ensure_same_shape(other, "div_elem")?;
        let floor = T::division_floor();
        if let Some(bad) = other.data.iter().find(|d| d.abs() < floor) {
            return Err(Error::DivisionByZero(bad.to_f64_lossy()));
        }
        self.zip_map(other, "div_elem", |a, b| a / b)
    }

    /// Entrywise `self / (other + eps)`; the offset takes the place of the floor check.
    pub fn div_elem_offset(&self, other: &Self, eps: T) -> Result<Self> {
        self.zip_map(other, "div_elem_offset", |a, b| a / (b + eps))
    }

    /// In-place `self += alpha · other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.ensure_same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn abs(&self) -> Self {
        self.map(|v| v.abs())
    }

    pub fn sigmoid(&self) -> Self {
        self.map(Scalar::sigmoid)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: T) -> Self {
        self.map(|v| v + s)
    }

    pub fn div_scalar(&self, d: T) -> Result<Self> {
        if d.abs() < T::division_floor() {
            return Err(Error::DivisionByZero(d.to_f64_lossy()));
        }
        Ok(self.map(|v| v / d))
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.data.len()).unwrap()
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// Euclidean norm of every column.
    pub fn column_norms(&self) -> Vec<T> {
        let mut sq = vec![T::zero(); self.cols];
        for i in 0..self.rows {
            for (acc, &v) in sq.iter_mut().zip(self.row(i)) {
                *acc += v * v;
            }
        }
        sq.into_iter().map(T::sqrt).collect()
    }

    /// Euclidean norm of every row.
    pub fn row_norms(&self) -> Vec<T> {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect()
    }

    pub fn select_columns(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Empty("column selection"));
        }
        if let Some(&bad) = indices.iter().find(|&&j| j >= self.cols) {
            return Err(Error::Index {
                index: bad,
                bound: self.cols,
            });
        }
        Ok(Self::from_fn(self.rows, indices.len(), |i, j| self.get(i, indices[j])))
    }

    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Empty("row selection"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.rows) {
            return Err(Error::Index {
                index: bad,
                bound: self.rows,
            });
        }
        Ok(Self::from_fn(indices.len(), self.cols, |i, j| self.get(indices[i], j)))
    }

    /// Copy of the top-left `rows × cols` block.
    pub fn block(&self, rows: usize, cols: usize) -> Result<Self> {
        if rows > self.rows || cols > self.cols || rows == 0 || cols == 0 {
            return Err(Error::shape("block", self.shape(), (rows, cols)));
        }
        Ok(Self::from_fn(rows, cols, |i, j| self.get(i, j)))
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for row in self.data.chunks(self.cols) {
            writeln!(f, "  {row:?}")?;
        }
        write!(f, "]")
    }
}
