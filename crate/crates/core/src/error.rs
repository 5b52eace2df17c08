use thiserror::Error;

/// Errors raised by matrix routines, adapters, merges and the training harness.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("SVD did not converge after {iterations} sweeps")]
    NonConvergence { iterations: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index {index} out of range for length {bound}")]
    Index { index: usize, bound: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("division by near-zero denominator {0:e}")]
    DivisionByZero(f64),

    #[error("non-finite loss at step {step}: {context}")]
    NonFinite { step: usize, context: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty input: {0}")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape {
            op,
            left_rows: left.0,
            left_cols: left.1,
            right_rows: right.0,
            right_cols: right.1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
