//! Folding trained CABR deltas into persistent state.
//!
//! * **M1** adds `C·A·B·R` straight into the base weight.
//! * **M2** keeps the base frozen and moves the live `B` into an accumulator:
//!   `A_frozen ← A`, `B_accum ← B_accum + B`, `B ← 0`. The effective delta is
//!   then `C·A_frozen·B_accum·R + C·A·B·R`.
//!
//! Both strategies zero the live `B` after merging.

use std::fmt;
use std::str::FromStr;

use crate::adapters::CabrAdapter;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::smagnorm::{apply_smagnorm, SMagNormConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MergeStrategy {
    M1,
    M2,
}

impl fmt::Display for MergeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergeStrategy::M1 => "M1",
            MergeStrategy::M2 => "M2",
        })
    }
}

impl FromStr for MergeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "M1" | "m1" => Ok(MergeStrategy::M1),
            "M2" | "m2" => Ok(MergeStrategy::M2),
            other => Err(Error::Config(format!("unknown merge strategy {other:?}"))),
        }
    }
}

/// Record of one merge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeEvent {
    pub step: usize,
    pub strategy: MergeStrategy,
    /// Frobenius norm of the live delta that was folded.
    pub delta_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeState<T> {
    pub strategy: MergeStrategy,
    pub fusion_interval: usize,
    pub step_counter: usize,
    /// M2 only.
    pub a_frozen: Option<Matrix<T>>,
    /// M2 only; zero until the first merge.
    pub b_accum: Option<Matrix<T>>,
    pub merge_count: usize,
}

impl<T: Scalar> MergeState<T> {
    pub fn new(strategy: MergeStrategy, fusion_interval: usize, adapter: &CabrAdapter<T>) -> Result<Self> {
        if fusion_interval == 0 {
            return Err(Error::Config("fusion interval must be at least 1".into()));
        }
        let (a_frozen, b_accum) = match strategy {
            MergeStrategy::M1 => (None, None),
            MergeStrategy::M2 => (Some(adapter.w_a.clone()), Some(Matrix::zeros(adapter.m(), adapter.r()))),
        };
        Ok(Self {
            strategy,
            fusion_interval,
            step_counter: 0,
            a_frozen,
            b_accum,
            merge_count: 0,
        })
    }

    /// Called by the trainer once per optimizer step, before [`fusion_tick`].
    pub fn advance(&mut self) {
        self.step_counter += 1;
    }

    /// `C·A_frozen·B_accum·R` under M2; `None` under M1.
    pub fn accumulated_delta(&self, adapter: &CabrAdapter<T>) -> Option<Matrix<T>> {
        match (&self.a_frozen, &self.b_accum) {
            (Some(a), Some(b)) => Some(adapter.delta_with(a, b)),
            _ => None,
        }
    }

    /// Accumulated plus live delta.
    pub fn total_delta(&self, adapter: &CabrAdapter<T>) -> Matrix<T> {
        let live = adapter.materialize_delta();
        match self.accumulated_delta(adapter) {
            Some(acc) => acc.add(&live).expect("deltas share the base shape"),
            None => live,
        }
    }
}

/// Returns `w_base + C·A·B·R` and zeros the adapter's live `B`.
pub fn merge_m1<T: Scalar>(adapter: &mut CabrAdapter<T>, w_base: &Matrix<T>) -> Result<Matrix<T>> {
    let delta = adapter.materialize_delta();
    let next = w_base.add(&delta)?;
    adapter.w_b.fill_zero();
    Ok(next)
}

pub fn merge_m2<T: Scalar>(state: &mut MergeState<T>, adapter: &mut CabrAdapter<T>) -> Result<()> {
    if state.strategy != MergeStrategy::M2 {
        return Err(Error::Contract(format!(
            "merge_m2 called on a {} merge state",
            state.strategy
        )));
    }
    let accum = state
        .b_accum
        .as_mut()
        .ok_or_else(|| Error::Contract("M2 state without accumulator".into()))?;
    accum.axpy(T::one(), &adapter.w_b)?;
    state.a_frozen = Some(adapter.w_a.clone());
    adapter.w_b.fill_zero();
    Ok(())
}

/// Weight the layer computes with: S-MagNorm over the base and the total delta.
pub fn effective_weight<T: Scalar>(
    state: &MergeState<T>,
    adapter: &CabrAdapter<T>,
    w_base: &Matrix<T>,
    config: &SMagNormConfig<T>,
) -> Result<Matrix<T>> {
    let delta = state.total_delta(adapter);
    Ok(apply_smagnorm(w_base, &delta, config)?.updated)
}

/// Merges unconditionally with the state's strategy (used at task boundaries).
pub fn force_merge<T: Scalar>(
    state: &mut MergeState<T>,
    adapter: &mut CabrAdapter<T>,
    w_base: &mut Matrix<T>,
) -> Result<MergeEvent> {
    let delta_norm = adapter.materialize_delta().frobenius_norm().to_f64_lossy();
    match state.strategy {
        MergeStrategy::M1 => *w_base = merge_m1(adapter, w_base)?,
        MergeStrategy::M2 => merge_m2(state, adapter)?,
    }
    state.merge_count += 1;
    Ok(MergeEvent {
        step: state.step_counter,
        strategy: state.strategy,
        delta_norm,
    })
}

/// Merges when the step counter lands on a multiple of the fusion interval.
pub fn fusion_tick<T: Scalar>(
    state: &mut MergeState<T>,
    adapter: &mut CabrAdapter<T>,
    w_base: &mut Matrix<T>,
) -> Result<Option<MergeEvent>> {
    if state.step_counter == 0 || !state.step_counter.is_multiple_of(state.fusion_interval) {
        return Ok(None);
    }
    force_merge(state, adapter, w_base).map(Some)
}
