//! Continual fine-tuning with CUR-anchored low-rank adapters.
//!
//! The crate implements the CABR adapter (frozen least-norm columns `C` and
//! rows `R` around a trainable expansion `A·B`), sigmoid magnitude
//! normalization of the merged weight, two merge strategies, LoRA and
//! CUR-LoRA baselines, and a small MLP harness for sequential-task
//! experiments. Numeric code is generic over [`Scalar`] (`f32`/`f64`); the
//! aliases below fix the common `f64` instantiations.

pub mod adapters;
pub mod cur;
pub mod error;
pub mod experiment;
pub mod matrix;
pub mod merge;
pub mod metrics;
pub mod scalar;
pub mod selftest;
pub mod smagnorm;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use scalar::Scalar;

pub type MatrixF64 = Matrix<f64>;
pub type MatrixF32 = Matrix<f32>;
pub type CabrAdapterF64 = adapters::CabrAdapter<f64>;
pub type LoraAdapterF64 = adapters::LoraAdapter<f64>;
pub type CurLoraAdapterF64 = adapters::CurLoraAdapter<f64>;
pub type SMagNormConfigF64 = smagnorm::SMagNormConfig<f64>;
pub type MergeStateF64 = merge::MergeState<f64>;
pub type ModelF64 = trainer::Model<f64>;
