//! Plain-text matrix format: a `rows cols` header line followed by one line
//! per row of space-separated values printed with 17 significant digits.

use std::fmt::Write as _;

use super::Matrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn write_matrix<T: Scalar>(m: &Matrix<T>) -> String {
    let mut out = String::with_capacity(m.rows() * m.cols() * 24 + 16);
    let _ = writeln!(out, "{} {}", m.rows(), m.cols());
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|v| format!("{:.16e}", v.to_f64_lossy())).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Parses one matrix from the front of `lines` (numbered, blank lines removed),
/// advancing the iterator past it.
pub fn read_matrix<'a, T: Scalar>(lines: &mut impl Iterator<Item = (usize, &'a str)>) -> Result<Matrix<T>> {
    let (hline, header) = lines.next().ok_or(Error::Parse {
        line: 0,
        msg: "missing matrix header".into(),
    })?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse {
            line: hline,
            msg: format!("bad header {header:?}: {e}"),
        })?;
    let [rows, cols] = dims[..] else {
        return Err(Error::Parse {
            line: hline,
            msg: format!("header must be `rows cols`, got {header:?}"),
        });
    };
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (lno, line) = lines.next().ok_or(Error::Parse {
            line: hline + r + 1,
            msg: "unexpected end of matrix".into(),
        })?;
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|e| Error::Parse {
                line: lno,
                msg: format!("bad value {tok:?}: {e}"),
            })?;
            data.push(T::lit(v));
        }
        if data.len() - before != cols {
            return Err(Error::Parse {
                line: lno,
                msg: format!("expected {cols} values, got {}", data.len() - before),
            });
        }
    }
    Matrix::new(rows, cols, data).map_err(|e| Error::Parse {
        line: hline,
        msg: e.to_string(),
    })
}

/// Convenience wrapper over [`read_matrix`] for a string holding one matrix.
pub fn parse_matrix<T: Scalar>(text: &str) -> Result<Matrix<T>> {
    let mut lines = numbered_lines(text);
    read_matrix(&mut lines)
}

/// Non-blank lines paired with their 1-based line numbers.
pub(crate) fn numbered_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
}

impl<T: Scalar> std::str::FromStr for Matrix<T> {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_matrix(s)
    }
}
