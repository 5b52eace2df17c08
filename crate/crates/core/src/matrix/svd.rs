//! Thin SVD by one-sided (Hestenes) Jacobi rotations.

use super::Matrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Sweep cap before the decomposition reports non-convergence.
pub const SVD_MAX_SWEEPS: usize = 100;

/// Thin decomposition `w = u · diag(s) · vᵀ` with `k = min(rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult<T> {
    pub u: Matrix<T>,
    pub s: Vec<T>,
    pub v: Matrix<T>,
}

impl<T: Scalar> SvdResult<T> {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> Matrix<T> {
        let us = Matrix::from_fn(self.u.rows(), self.s.len(), |i, j| self.u.get(i, j) * self.s[j]);
        us.matmul_t(&self.v).expect("svd factors chain")
    }

    /// Sum of singular values.
    pub fn nuclear_norm(&self) -> T {
        self.s.iter().copied().sum()
    }

    pub fn spectral_norm(&self) -> T {
        self.s.first().copied().unwrap_or_else(T::zero)
    }
}

/// Computes the thin SVD of `w`.
///
/// Singular values come back non-increasing. Each column of `u` has its
/// largest-magnitude entry positive (first such entry on ties), with the
/// paired column of `v` flipped to match, so the result is deterministic.
pub fn svd<T: Scalar>(w: &Matrix<T>) -> Result<SvdResult<T>> {
    if !w.is_finite() {
        return Err(Error::Contract("svd input must be finite".into()));
    }
    if w.rows() >= w.cols() {
        tall_svd(w)
    } else {
        let t = tall_svd(&w.transpose())?;
        let mut out = SvdResult { u: t.v, s: t.s, v: t.u };
        fix_signs(&mut out);
        Ok(out)
    }
}

/// Requires `rows >= cols`.
fn tall_svd<T: Scalar>(w: &Matrix<T>) -> Result<SvdResult<T>> {
    let (m, n) = w.shape();
    // Work column-major: cols[j] is column j of the rotated matrix.
    let mut cols: Vec<Vec<T>> = (0..n).map(|j| w.column(j)).collect();
    let mut v: Vec<Vec<T>> = (0..n)
        .map(|j| {
            let mut e = vec![T::zero(); n];
            e[j] = T::one();
            e
        })
        .collect();

    let tol = T::epsilon() * T::from_usize(m).unwrap().sqrt();
    let mut converged = n < 2;
    for _ in 0..SVD_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha: T = cols[p].iter().map(|&x| x * x).sum();
                let beta: T = cols[q].iter().map(|&x| x * x).sum();
                let gamma: T = cols[p].iter().zip(&cols[q]).map(|(&a, &b)| a * b).sum();
                if gamma == T::zero() || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let two = T::lit(2.0);
                let zeta = (beta - alpha) / (two * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            iterations: SVD_MAX_SWEEPS,
        });
    }

    let norms: Vec<T> = cols
        .iter()
        .map(|c| c.iter().map(|&x| x * x).sum::<T>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap().then(a.cmp(&b)));

    let s_max = norms[order[0]];
    let negligible = s_max * T::epsilon() * T::from_usize(m.max(n)).unwrap();
    let mut s = Vec::with_capacity(n);
    let mut u_cols: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut v_cols: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        if sigma > negligible && sigma > T::zero() {
            u_cols.push(cols[j].iter().map(|&x| x / sigma).collect());
            s.push(sigma);
        } else {
            u_cols.push(vec![T::zero(); m]);
            s.push(T::zero());
            deficient.push(slot);
        }
        v_cols.push(v[j].clone());
    }
    complete_basis(&mut u_cols, &deficient);

    let mut out = SvdResult {
        u: Matrix::from_fn(m, n, |i, j| u_cols[j][i]),
        s,
        v: Matrix::from_fn(n, n, |i, j| v_cols[j][i]),
    };
    fix_signs(&mut out);
    Ok(out)
}

fn rotate<T: Scalar>(cols: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (lo, hi) = cols.split_at_mut(q);
    let (a, b) = (&mut lo[p], &mut hi[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills the listed slots with unit vectors orthogonal to every other column,
/// trying standard basis vectors in order (twice-applied Gram-Schmidt).
fn complete_basis<T: Scalar>(cols: &mut [Vec<T>], slots: &[usize]) {
    if slots.is_empty() {
        return;
    }
    let m = cols[0].len();
    let mut filled: Vec<bool> = (0..cols.len()).map(|j| !slots.contains(&j)).collect();
    let mut candidate = 0;
    for &slot in slots {
        while candidate < m {
            let mut e = vec![T::zero(); m];
            e[candidate] = T::one();
            candidate += 1;
            for _ in 0..2 {
                for (j, col) in cols.iter().enumerate() {
                    if !filled[j] {
                        continue;
                    }
                    let dot: T = col.iter().zip(&e).map(|(&a, &b)| a * b).sum();
                    for (x, &c) in e.iter_mut().zip(col) {
                        *x -= dot * c;
                    }
                }
            }
            let norm = e.iter().map(|&x| x * x).sum::<T>().sqrt();
            if norm > T::lit(1e-3) {
                cols[slot] = e.into_iter().map(|x| x / norm).collect();
                filled[slot] = true;
                break;
            }
        }
    }
}

fn fix_signs<T: Scalar>(out: &mut SvdResult<T>) {
    for j in 0..out.s.len() {
        let mut best = 0;
        for i in 1..out.u.rows() {
            if out.u.get(i, j).abs() > out.u.get(best, j).abs() {
                best = i;
            }
        }
        if out.u.get(best, j) < T::zero() {
            for i in 0..out.u.rows() {
                let x = out.u.get(i, j);
                out.u.set(i, j, -x);
            }
            for i in 0..out.v.rows() {
                let x = out.v.get(i, j);
                out.v.set(i, j, -x);
            }
        }
    }
}
