//! Selection of the least important columns and rows of a weight matrix.
//!
//! Importance is the Euclidean norm of a column or row; the `r` smallest are
//! kept, lowest index first on ties. Index lists are stored ascending.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Frozen columns `c` (h×r) and rows `r_mat` (r×d) gathered from a base weight.
#[derive(Debug, Clone, PartialEq)]
pub struct CurSelection<T> {
    pub col_indices: Vec<usize>,
    pub row_indices: Vec<usize>,
    pub c: Matrix<T>,
    pub r_mat: Matrix<T>,
}

impl<T: Scalar> CurSelection<T> {
    pub fn rank(&self) -> usize {
        self.col_indices.len()
    }

    /// Shape `(h, d)` of the weight the selection was taken from.
    pub fn base_shape(&self) -> (usize, usize) {
        (self.c.rows(), self.r_mat.cols())
    }
}

/// Indices of the `r` smallest values, ties broken by lower index, returned ascending.
pub fn smallest_indices<T: Scalar>(values: &[T], r: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite norms").then(a.cmp(&b)));
    let mut picked: Vec<usize> = order.into_iter().take(r).collect();
    picked.sort_unstable();
    picked
}

pub fn select_least_important<T: Scalar>(w_base: &Matrix<T>, r: usize) -> Result<CurSelection<T>> {
    let (h, d) = w_base.shape();
    if r == 0 || r > h.min(d) {
        return Err(Error::Config(format!(
            "selection rank {r} must be in 1..={} for a {h}x{d} weight",
            h.min(d)
        )));
    }
    if !w_base.is_finite() {
        return Err(Error::Contract("base weight must be finite".into()));
    }
    let col_indices = smallest_indices(&w_base.column_norms(), r);
    let row_indices = smallest_indices(&w_base.row_norms(), r);
    let (c, r_mat) = extract(w_base, &col_indices, &row_indices)?;
    Ok(CurSelection {
        col_indices,
        row_indices,
        c,
        r_mat,
    })
}

/// Gathers the listed columns into `c` and the listed rows into `r_mat`.
pub fn extract<T: Scalar>(
    w_base: &Matrix<T>,
    col_indices: &[usize],
    row_indices: &[usize],
) -> Result<(Matrix<T>, Matrix<T>)> {
    Ok((w_base.select_columns(col_indices)?, w_base.select_rows(row_indices)?))
}
