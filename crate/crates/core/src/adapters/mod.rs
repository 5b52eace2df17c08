//! Adapter families: LoRA (`A·B`), CUR-LoRA (`C·U·R`) and CABR (`C·W_A·W_B·R`).
//!
//! Every family starts with a zero delta, so the adapted weight equals the
//! base weight until the first update.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cur::{select_least_important, CurSelection};
use crate::error::{Error, Result};
use crate::matrix::{svd, Matrix};
use crate::scalar::Scalar;

/// Desk-scale `(r, m)`: `r = max(2, ⌈0.05·min(h, d)⌉)`, `m = ⌈4r/3⌉`, keeping
/// the 150:200 ratio of the full-size configuration.
pub fn default_ranks(h: usize, d: usize) -> (usize, usize) {
    let r = ((0.05 * h.min(d) as f64).ceil() as usize).max(2);
    let m = (4 * r).div_ceil(3);
    (r, m)
}

/// CUR selection with an expanded trainable core `W_A (r×m) · W_B (m×r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CabrAdapter<T> {
    pub selection: CurSelection<T>,
    pub w_a: Matrix<T>,
    pub w_b: Matrix<T>,
}

impl<T: Scalar> CabrAdapter<T> {
    /// Assembles an adapter from explicit parts, checking that the chain
    /// `(h×r)(r×m)(m×r)(r×d)` is consistent and `m > r`.
    pub fn from_parts(selection: CurSelection<T>, w_a: Matrix<T>, w_b: Matrix<T>) -> Result<Self> {
        let r = selection.rank();
        if selection.c.cols() != r || selection.r_mat.rows() != r {
            return Err(Error::Contract("selection factors disagree on rank".into()));
        }
        if w_a.rows() != r || w_b.cols() != r || w_a.cols() != w_b.rows() {
            return Err(Error::shape("cabr factors", w_a.shape(), w_b.shape()));
        }
        if w_a.cols() <= r {
            return Err(Error::Config(format!(
                "CABR inner dimension m={} must exceed r={r}",
                w_a.cols()
            )));
        }
        Ok(Self { selection, w_a, w_b })
    }

    pub fn r(&self) -> usize {
        self.selection.rank()
    }

    pub fn m(&self) -> usize {
        self.w_a.cols()
    }

    pub fn c(&self) -> &Matrix<T> {
        &self.selection.c
    }

    pub fn r_mat(&self) -> &Matrix<T> {
        &self.selection.r_mat
    }

    /// `((C·w_a)·w_b)·R`.
    pub fn materialize_delta(&self) -> Matrix<T> {
        self.delta_with(&self.w_a, &self.w_b)
    }

    /// The CABR product with substitute core factors.
    pub fn delta_with(&self, w_a: &Matrix<T>, w_b: &Matrix<T>) -> Matrix<T> {
        self.c()
            .matmul(w_a)
            .and_then(|ca| ca.matmul(w_b))
            .and_then(|cab| cab.matmul(self.r_mat()))
            .expect("CABR factors chain by construction")
    }

    pub fn trainable_params(&self) -> usize {
        2 * self.r() * self.m()
    }
}

/// Builds a CABR adapter over `w_base`.
///
/// `C` and `R` are the least-norm columns and rows. `W_A` is the truncated SVD
/// product `U[0:r, 0:k] · diag(S[0:k]) · V[0:m, 0:k]ᵀ` with `k = min(r, m)`,
/// and `W_B` is zero.
pub fn cabr_init<T: Scalar>(w_base: &Matrix<T>, r: usize, m: usize) -> Result<CabrAdapter<T>> {
    let (h, d) = w_base.shape();
    if m <= r {
        return Err(Error::Config(format!(
            "CABR needs an expanding core: m={m} must exceed r={r}"
        )));
    }
    if r == 0 || r > h.min(d) {
        return Err(Error::Config(format!(
            "rank r={r} must be in 1..={} for a {h}x{d} weight",
            h.min(d)
        )));
    }
    if m > d {
        return Err(Error::Config(format!(
            "CABR inner dimension m={m} exceeds the {d} right singular vector rows"
        )));
    }
    let selection = select_least_important(w_base, r)?;
    let dec = svd(w_base)?;
    let k = r.min(m).min(dec.rank());
    let w_a = Matrix::from_fn(r, m, |i, j| {
        (0..k).fold(T::zero(), |acc, t| acc + dec.u.get(i, t) * dec.s[t] * dec.v.get(j, t))
    });
    let w_b = Matrix::zeros(m, r);
    CabrAdapter::from_parts(selection, w_a, w_b)
}

/// Classic additive low-rank adapter `scaling · A·B`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub a: Matrix<T>,
    pub b: Matrix<T>,
    pub scaling: T,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn materialize_delta(&self) -> Matrix<T> {
        self.a
            .matmul(&self.b)
            .expect("LoRA factors chain by construction")
            .scale(self.scaling)
    }

    pub fn trainable_params(&self) -> usize {
        self.a.rows() * self.a.cols() + self.b.rows() * self.b.cols()
    }
}

/// `A` (h×r) drawn Kaiming-uniform from `±√(6/r)` with a seeded generator; `B` zero.
pub fn lora_init<T: Scalar>(h: usize, d: usize, r: usize, seed: u64) -> Result<LoraAdapter<T>> {
    if r == 0 || r > h.min(d) {
        return Err(Error::Config(format!(
            "LoRA rank {r} must be in 1..={} for a {h}x{d} weight",
            h.min(d)
        )));
    }
    let bound = (6.0 / r as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Matrix::from_fn(h, r, |_, _| T::lit(rng.random_range(-bound..bound)));
    Ok(LoraAdapter {
        a,
        b: Matrix::zeros(r, d),
        scaling: T::one(),
    })
}

/// CUR decomposition with a trainable square core `U`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurLoraAdapter<T> {
    pub selection: CurSelection<T>,
    pub u: Matrix<T>,
}

impl<T: Scalar> CurLoraAdapter<T> {
    pub fn materialize_delta(&self) -> Matrix<T> {
        self.selection
            .c
            .matmul(&self.u)
            .and_then(|cu| cu.matmul(&self.selection.r_mat))
            .expect("CUR factors chain by construction")
    }

    pub fn trainable_params(&self) -> usize {
        self.u.rows() * self.u.cols()
    }
}

pub fn curlora_init<T: Scalar>(w_base: &Matrix<T>, r: usize) -> Result<CurLoraAdapter<T>> {
    let selection = select_least_important(w_base, r)?;
    Ok(CurLoraAdapter {
        selection,
        u: Matrix::zeros(r, r),
    })
}

/// Adapter attached to a layer, if any.
#[derive(Debug, Clone, PartialEq)]
pub enum Adapter<T> {
    None,
    Lora(LoraAdapter<T>),
    CurLora(CurLoraAdapter<T>),
    Cabr(CabrAdapter<T>),
}

impl<T: Scalar> Adapter<T> {
    pub fn family(&self) -> &'static str {
        match self {
            Adapter::None => "NONE",
            Adapter::Lora(_) => "LORA",
            Adapter::CurLora(_) => "CURLORA",
            Adapter::Cabr(_) => "CABR",
        }
    }

    /// `None` when no adapter is attached.
    pub fn materialize_delta(&self) -> Option<Matrix<T>> {
        match self {
            Adapter::None => None,
            Adapter::Lora(a) => Some(a.materialize_delta()),
            Adapter::CurLora(a) => Some(a.materialize_delta()),
            Adapter::Cabr(a) => Some(a.materialize_delta()),
        }
    }

    pub fn trainable_params(&self) -> usize {
        match self {
            Adapter::None => 0,
            Adapter::Lora(a) => a.trainable_params(),
            Adapter::CurLora(a) => a.trainable_params(),
            Adapter::Cabr(a) => a.trainable_params(),
        }
    }
}
