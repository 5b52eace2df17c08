//! Cross-run summaries and pairwise orderings.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use super::runner::{read_manifest_config, LabError};
use crate::metrics::{read_csv, MetricRow};

/// Compared quantities and whether larger values are better.
pub const COMPARED: [(&str, bool); 3] = [("retention", true), ("drift_abs", false), ("grad_variance", false)];

#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub rows: Vec<MetricRow>,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun, LabError> {
    let config = read_manifest_config(dir)?;
    let path = dir.join("metrics.csv");
    let text = fs::read_to_string(&path).map_err(|e| LabError::io(&path, e))?;
    let rows = read_csv(&text).map_err(|e| LabError::io(&path, e))?;
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        config,
        rows,
    })
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut BTreeMap<String, String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                flatten(&format!("{prefix}.{k}"), v, out);
            }
        }
        v => {
            out.insert(prefix.to_string(), v.to_string());
        }
    }
}

/// Keys that define the task sequence; runs must agree on all of them.
fn schedule_fields(cfg: &ExperimentConfig) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut schedule = cfg.schedule.clone();
    if let Ok(r) = cfg.resolve() {
        schedule.learning_rate = Some(r.learning_rate);
    }
    flatten(
        "schedule",
        &toml::Value::try_from(&schedule).expect("serializable"),
        &mut out,
    );
    flatten(
        "model",
        &toml::Value::try_from(&cfg.model).expect("serializable"),
        &mut out,
    );
    out
}

/// Field-by-field differences between two runs' schedules, empty when compatible.
pub fn schedule_diff(a: &LoadedRun, b: &LoadedRun) -> Vec<String> {
    let (fa, fb) = (schedule_fields(&a.config), schedule_fields(&b.config));
    let mut keys: Vec<&String> = fa.keys().chain(fb.keys()).collect();
    keys.sort();
    keys.dedup();
    let missing = "<unset>".to_string();
    keys.into_iter()
        .filter(|k| fa.get(*k) != fb.get(*k))
        .map(|k| {
            format!(
                "  {k}: {} ({}) vs {} ({})",
                fa.get(k).unwrap_or(&missing),
                a.dir.display(),
                fb.get(k).unwrap_or(&missing),
                b.dir.display()
            )
        })
        .collect()
}

/// One method within one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmSummary {
    pub label: String,
    pub run: usize,
    pub method: String,
    pub seeds: usize,
    /// Means over seeds (and tasks, for per-task quantities), in [`COMPARED`] order.
    pub means: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairVerdict {
    pub a: String,
    pub b: String,
    pub metric: &'static str,
    pub a_wins: usize,
    pub b_wins: usize,
    pub ties: usize,
}

impl PairVerdict {
    pub fn ordering(&self) -> Ordering {
        self.a_wins.cmp(&self.b_wins)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub arms: Vec<ArmSummary>,
    pub pairs: Vec<PairVerdict>,
}

/// Per-seed value of `metric`: run-level rows as is, per-task rows averaged over tasks.
fn per_seed(rows: &[MetricRow], method: &str, metric: &str) -> BTreeMap<u64, f64> {
    let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.method == method && r.metric_name == metric) {
        let e = acc.entry(r.seed).or_insert((0.0, 0));
        e.0 += r.value;
        e.1 += 1;
    }
    acc.into_iter().map(|(s, (sum, n))| (s, sum / n as f64)).collect()
}

fn methods_of(run: &LoadedRun) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in &run.rows {
        if !out.contains(&r.method) {
            out.push(r.method.clone());
        }
    }
    out
}

fn verdict(a: &ArmSummary, b: &ArmSummary, runs: &[LoadedRun]) -> Vec<PairVerdict> {
    COMPARED
        .iter()
        .map(|&(metric, higher)| {
            let va = per_seed(&runs[a.run].rows, &a.method, metric);
            let vb = per_seed(&runs[b.run].rows, &b.method, metric);
            let (mut a_wins, mut b_wins, mut ties) = (0, 0, 0);
            for (seed, x) in &va {
                let Some(y) = vb.get(seed) else { continue };
                match x.partial_cmp(y) {
                    Some(Ordering::Equal) => ties += 1,
                    Some(o) => {
                        if (o == Ordering::Greater) == higher {
                            a_wins += 1
                        } else {
                            b_wins += 1
                        }
                    }
                    None if x.is_nan() && y.is_nan() => ties += 1,
                    None => {}
                }
            }
            PairVerdict {
                a: a.label.clone(),
                b: b.label.clone(),
                metric,
                a_wins,
                b_wins,
                ties,
            }
        })
        .collect()
}

/// Summarizes two or more runs with identical schedules.
///
/// For each pair of runs, methods present in both are compared like for
/// like; when the runs share no method every cross pair is compared. Win
/// counts are over the seeds both arms ran.
pub fn compare(dirs: &[PathBuf]) -> Result<Comparison, LabError> {
    if dirs.len() < 2 {
        return Err(LabError::Incompatible(
            "compare needs at least two run directories".into(),
        ));
    }
    let runs = dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>, _>>()?;
    for other in &runs[1..] {
        let diff = schedule_diff(&runs[0], other);
        if !diff.is_empty() {
            return Err(LabError::Incompatible(diff.join("\n")));
        }
    }

    let mut arms = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        for method in methods_of(run) {
            let series: Vec<BTreeMap<u64, f64>> =
                COMPARED.iter().map(|(m, _)| per_seed(&run.rows, &method, m)).collect();
            let mean = |s: &BTreeMap<u64, f64>| s.values().sum::<f64>() / s.len().max(1) as f64;
            arms.push(ArmSummary {
                label: format!("{}#{}", method, i + 1),
                run: i,
                seeds: series[0].len(),
                means: [mean(&series[0]), mean(&series[1]), mean(&series[2])],
                method,
            });
        }
    }

    let mut pairs = Vec::new();
    for i in 0..runs.len() {
        for j in i + 1..runs.len() {
            let (ai, aj): (Vec<&ArmSummary>, Vec<&ArmSummary>) = (
                arms.iter().filter(|a| a.run == i).collect(),
                arms.iter().filter(|a| a.run == j).collect(),
            );
            let shared = ai.iter().any(|a| aj.iter().any(|b| a.method == b.method));
            for a in &ai {
                for b in &aj {
                    if !shared || a.method == b.method {
                        pairs.extend(verdict(a, b, &runs));
                    }
                }
            }
        }
    }
    Ok(Comparison { arms, pairs })
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:>5} {:>14} {:>14} {:>14}",
            "arm", "seeds", "retention", "drift_abs", "grad_variance"
        )?;
        for a in &self.arms {
            writeln!(
                f,
                "{:<16} {:>5} {:>14.6e} {:>14.6e} {:>14.6e}",
                a.label, a.seeds, a.means[0], a.means[1], a.means[2]
            )?;
        }
        writeln!(f)?;
        for p in &self.pairs {
            let who = match p.ordering() {
                Ordering::Greater => p.a.as_str(),
                Ordering::Less => p.b.as_str(),
                Ordering::Equal => "tie",
            };
            writeln!(
                f,
                "{} vs {} on {}: {}-{} ({} ties) -> {}",
                p.a, p.b, p.metric, p.a_wins, p.b_wins, p.ties, who
            )?;
        }
        Ok(())
    }
}
