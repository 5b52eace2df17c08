//! Weight drift, gradient stability and retention measurements.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::matrix::{svd, Matrix};
use crate::scalar::Scalar;

/// Singular-value norm used for drift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DriftNorm {
    /// Sum of singular values.
    #[default]
    Nuclear,
    /// Largest singular value.
    Spectral,
}

impl FromStr for DriftNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nuclear" => Ok(DriftNorm::Nuclear),
            "spectral" => Ok(DriftNorm::Spectral),
            other => Err(Error::Config(format!("unknown drift norm {other:?}"))),
        }
    }
}

impl fmt::Display for DriftNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DriftNorm::Nuclear => "nuclear",
            DriftNorm::Spectral => "spectral",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftRecord {
    pub method: String,
    pub layer: usize,
    pub nuclear_before: f64,
    pub nuclear_after: f64,
    pub drift: f64,
}

pub fn matrix_norm<T: Scalar>(w: &Matrix<T>, norm: DriftNorm) -> Result<f64> {
    let s = svd(w)?;
    Ok(match norm {
        DriftNorm::Nuclear => s.nuclear_norm(),
        DriftNorm::Spectral => s.spectral_norm(),
    }
    .to_f64_lossy())
}

/// `‖after‖ − ‖before‖` in the chosen singular-value norm.
pub fn svd_norm_drift<T: Scalar>(
    method: &str,
    layer: usize,
    w_before: &Matrix<T>,
    w_after: &Matrix<T>,
    norm: DriftNorm,
) -> Result<DriftRecord> {
    if w_before.shape() != w_after.shape() {
        return Err(Error::shape("svd_norm_drift", w_before.shape(), w_after.shape()));
    }
    let before = matrix_norm(w_before, norm)?;
    let after = matrix_norm(w_after, norm)?;
    Ok(DriftRecord {
        method: method.to_string(),
        layer,
        nuclear_before: before,
        nuclear_after: after,
        drift: after - before,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradStats {
    pub series: Vec<f64>,
    pub range: f64,
    pub variance: f64,
}

/// Range and population variance of a gradient-norm series.
pub fn gradient_stats(series: &[f64]) -> Result<GradStats> {
    if series.is_empty() {
        return Err(Error::Contract("gradient statistics need a non-empty series".into()));
    }
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let variance = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let max = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = series.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(GradStats {
        series: series.to_vec(),
        range: max - min,
        variance,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetentionRecord {
    pub method: String,
    pub probe_metric_after_each_task: Vec<f64>,
    /// Probe metric right after the probe's own training (or before any task).
    pub own_metric: f64,
    /// `None` when the denominator is zero or the ratio is not finite.
    pub retention_ratio: Option<f64>,
}

/// Final probe metric relative to `own_metric`, oriented so higher is better.
pub fn retention_score(
    method: &str,
    own_metric: f64,
    probe_metric_after_each_task: &[f64],
    higher_is_better: bool,
) -> Result<RetentionRecord> {
    let last = *probe_metric_after_each_task
        .last()
        .ok_or(Error::Empty("probe evaluations"))?;
    let (num, den) = if higher_is_better {
        (last, own_metric)
    } else {
        (own_metric, last)
    };
    let ratio = if den == 0.0 { None } else { Some(num / den) };
    Ok(RetentionRecord {
        method: method.to_string(),
        probe_metric_after_each_task: probe_metric_after_each_task.to_vec(),
        own_metric,
        retention_ratio: ratio.filter(|r| r.is_finite()).map(|r| r.max(0.0)),
    })
}

/// One CSV row: `method,seed,task_index,metric_name,value`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub seed: u64,
    /// `None` for run-level metrics, written as `-1`.
    pub task_index: Option<usize>,
    pub metric_name: String,
    pub value: f64,
}

pub const CSV_HEADER: &str = "method,seed,task_index,metric_name,value";

impl MetricRow {
    pub fn new(method: &str, seed: u64, task_index: Option<usize>, metric_name: &str, value: f64) -> Self {
        Self {
            method: method.to_string(),
            seed,
            task_index,
            metric_name: metric_name.to_string(),
            value,
        }
    }

    pub fn to_csv(&self) -> String {
        let task = self.task_index.map_or_else(|| "-1".to_string(), |t| t.to_string());
        format!(
            "{},{},{},{},{:e}",
            self.method, self.seed, task, self.metric_name, self.value
        )
    }

    pub fn parse(line: &str, lineno: usize) -> Result<Self> {
        let bad = |msg: &str| Error::Parse {
            line: lineno,
            msg: msg.to_string(),
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let task_index = match fields[2] {
            "-1" => None,
            t => Some(t.parse().map_err(|_| bad("bad task_index"))?),
        };
        Ok(Self {
            method: fields[0].to_string(),
            seed: fields[1].parse().map_err(|_| bad("bad seed"))?,
            task_index,
            metric_name: fields[3].to_string(),
            value: fields[4].parse().map_err(|_| bad("bad value"))?,
        })
    }
}

pub fn write_csv<W: Write>(mut out: W, rows: &[MetricRow]) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for row in rows {
        writeln!(out, "{}", row.to_csv())?;
    }
    Ok(())
}

pub fn read_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header {CSV_HEADER:?}"),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| MetricRow::parse(l, i + 1))
        .collect()
}
