//! Grid execution and run-directory output.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, FieldError, ResolvedConfig};
use crate::adapters::write_checkpoint;
use crate::error::Error;
use crate::metrics::{write_csv, MetricRow};
use crate::trainer::{pretrained_model, run_continual, ContinualReport, Method, Model};

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(FieldError),
    #[error("numerical abort: method {method}, seed {seed}, step {step}: {context}")]
    Numerical {
        method: String,
        seed: u64,
        step: usize,
        context: String,
    },
    #[error("{method} seed {seed}: {source}")]
    Cell { method: String, seed: u64, source: Error },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{0} already holds a run; pass --force to overwrite")]
    Exists(PathBuf),
    #[error("incompatible runs:\n{0}")]
    Incompatible(String),
}

impl LabError {
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 2,
            LabError::Numerical { .. } => 3,
            _ => 1,
        }
    }

    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        LabError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }

    fn cell(method: &str, seed: u64, e: Error) -> Self {
        match e {
            Error::NonFinite { step, context } => LabError::Numerical {
                method: method.to_string(),
                seed,
                step,
                context,
            },
            Error::Config(msg) => LabError::Config(FieldError {
                field: format!("{method} seed {seed}"),
                message: msg,
            }),
            source => LabError::Cell {
                method: method.to_string(),
                seed,
                source,
            },
        }
    }
}

impl From<FieldError> for LabError {
    fn from(e: FieldError) -> Self {
        LabError::Config(e)
    }
}

/// One finished (method, seed) cell.
#[derive(Debug, Clone)]
pub struct CellOutput {
    pub method: Method,
    pub seed: u64,
    pub report: ContinualReport<f64>,
    pub model: Model<f64>,
}

fn run_cell(cfg: &ResolvedConfig, pretrained: &Model<f64>, method: Method, seed: u64) -> Result<CellOutput, LabError> {
    let schedule = cfg.schedule(seed);
    let mut model = pretrained.clone();
    let fail = |e| LabError::cell(method.name(), seed, e);
    model.attach(method, &cfg.method_config, seed).map_err(fail)?;
    let report = run_continual(&mut model, &schedule).map_err(fail)?;
    Ok(CellOutput {
        method,
        seed,
        report,
        model,
    })
}

fn pretrain(cfg: &ResolvedConfig, seed: u64) -> Result<Model<f64>, LabError> {
    pretrained_model(&cfg.model, &cfg.schedule(seed), seed).map_err(|e| LabError::cell("PRETRAIN", seed, e))
}

/// Runs every method × seed cell, in seed-major order. Pretraining is done
/// once per seed and shared. With `threads > 1` cells run on a rayon pool;
/// the output order and contents do not depend on the thread count.
pub fn run_grid(cfg: &ResolvedConfig, threads: usize) -> Result<Vec<CellOutput>, LabError> {
    let seeds = &cfg.raw.seeds;
    let cells: Vec<(usize, Method)> = (0..seeds.len())
        .flat_map(|s| cfg.methods.iter().map(move |&m| (s, m)))
        .collect();
    if threads <= 1 {
        let bases = seeds.iter().map(|&s| pretrain(cfg, s)).collect::<Result<Vec<_>, _>>()?;
        return cells
            .iter()
            .map(|&(s, m)| run_cell(cfg, &bases[s], m, seeds[s]))
            .collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| LabError::io(Path::new("<thread pool>"), e))?;
    pool.install(|| {
        let bases = seeds
            .par_iter()
            .map(|&s| pretrain(cfg, s))
            .collect::<Result<Vec<_>, _>>()?;
        cells
            .par_iter()
            .map(|&(s, m)| run_cell(cfg, &bases[s], m, seeds[s]))
            .collect()
    })
}

/// CSV rows of one cell.
///
/// Run level (`task_index = -1`): `probe_before`, `retention`. Per task:
/// `task_metric`, `probe_metric`, `final_loss`, `drift_l<k>`, `drift_abs`
/// (sum of per-layer |drift|), `grad_variance`, `grad_range`, `merges`, and
/// when S-MagNorm is active `mres_min`, `mres_max`, `mres_mean` over all steps.
pub fn metric_rows(cell: &CellOutput) -> Vec<MetricRow> {
    let name = cell.method.name();
    let rep = &cell.report;
    let row = |task: Option<usize>, metric: &str, value: f64| MetricRow::new(name, cell.seed, task, metric, value);
    let mut rows = vec![
        row(None, "probe_before", rep.probe_before),
        row(None, "retention", rep.retention.retention_ratio.unwrap_or(f64::NAN)),
    ];
    for (t, task) in rep.task_reports.iter().enumerate() {
        let at = Some(t);
        rows.push(row(at, "task_metric", rep.task_metrics[t]));
        rows.push(row(at, "probe_metric", rep.probe_after[t]));
        rows.push(row(at, "final_loss", task.final_loss().unwrap_or(f64::NAN)));
        for d in &rep.drift[t] {
            rows.push(row(at, &format!("drift_l{}", d.layer), d.drift));
        }
        rows.push(row(at, "drift_abs", rep.drift[t].iter().map(|d| d.drift.abs()).sum()));
        if let Some(g) = &rep.grad_stats[t] {
            rows.push(row(at, "grad_variance", g.variance));
            rows.push(row(at, "grad_range", g.range));
        }
        rows.push(row(at, "merges", task.merges.len() as f64));
        if !task.restriction.is_empty() {
            let r = &task.restriction;
            rows.push(row(
                at,
                "mres_min",
                r.iter().map(|s| s.min).fold(f64::INFINITY, f64::min),
            ));
            rows.push(row(
                at,
                "mres_max",
                r.iter().map(|s| s.max).fold(f64::NEG_INFINITY, f64::max),
            ));
            rows.push(row(
                at,
                "mres_mean",
                r.iter().map(|s| s.mean).sum::<f64>() / r.len() as f64,
            ));
        }
    }
    rows
}

pub fn csv_text(cells: &[CellOutput]) -> String {
    let rows: Vec<MetricRow> = cells.iter().flat_map(metric_rows).collect();
    let mut out = Vec::new();
    write_csv(&mut out, &rows).expect("writing to memory");
    String::from_utf8(out).expect("csv is utf-8")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub const MANIFEST_HEADER: &str = "# secura-lab run manifest";
pub const CONFIG_MARKER: &str = "## config";
pub const ARTIFACTS_MARKER: &str = "## artifacts";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Output root; the run goes to `<out>/<run-name>/`.
    pub out: PathBuf,
    pub force: bool,
    pub threads: usize,
    /// Replaces the config's seed list.
    pub seed_override: Option<Vec<u64>>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub rows: usize,
    pub cells: usize,
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, LabError> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    Ok(ExperimentConfig::parse(&text)?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), LabError> {
    fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

/// Validates `config`, runs the grid and writes `manifest.txt`, `metrics.csv`
/// and `checkpoints/` under `opts.out/<run-name>/`.
pub fn run_experiment(
    config: &ExperimentConfig,
    default_name: &str,
    opts: &RunOptions,
) -> Result<RunSummary, LabError> {
    let mut config = config.clone();
    if let Some(seeds) = &opts.seed_override {
        config.seeds = seeds.clone();
    }
    let name = config.name.clone().unwrap_or_else(|| default_name.to_string());
    config.name = Some(name.clone());
    let cfg = config.resolve()?;

    let dir = opts.out.join(&name);
    let manifest_path = dir.join("manifest.txt");
    let csv_path = dir.join("metrics.csv");
    let ckpt_dir = dir.join("checkpoints");
    let occupied = manifest_path.exists() || csv_path.exists() || ckpt_dir.exists();
    if occupied && !opts.force {
        return Err(LabError::Exists(dir));
    }

    let cells = run_grid(&cfg, opts.threads)?;
    let csv = csv_text(&cells);

    if ckpt_dir.exists() {
        fs::remove_dir_all(&ckpt_dir).map_err(|e| LabError::io(&ckpt_dir, e))?;
    }
    fs::create_dir_all(&ckpt_dir).map_err(|e| LabError::io(&ckpt_dir, e))?;
    write_file(&csv_path, csv.as_bytes())?;
    let mut artifacts = vec![("metrics.csv".to_string(), sha256_hex(csv.as_bytes()))];
    for cell in &cells {
        for (l, layer) in cell.model.layers.iter().enumerate() {
            let file = format!("{}_seed{}_layer{l}.txt", cell.method.name(), cell.seed);
            let text = write_checkpoint(&layer.adapter, layer.w_base.shape());
            write_file(&ckpt_dir.join(&file), text.as_bytes())?;
            artifacts.push((format!("checkpoints/{file}"), sha256_hex(text.as_bytes())));
        }
    }

    let mut manifest = format!("{MANIFEST_HEADER}\n{CONFIG_MARKER}\n{}", config.to_toml());
    manifest.push_str(&format!("{ARTIFACTS_MARKER}\n"));
    for (file, hash) in &artifacts {
        manifest.push_str(&format!("{hash}  {file}\n"));
    }
    write_file(&manifest_path, manifest.as_bytes())?;

    Ok(RunSummary {
        dir,
        rows: csv.lines().count() - 1,
        cells: cells.len(),
    })
}

/// The config echoed in a run's `manifest.txt`.
pub fn read_manifest_config(dir: &Path) -> Result<ExperimentConfig, LabError> {
    let path = dir.join("manifest.txt");
    if !dir.is_dir() {
        return Err(LabError::io(dir, "no such run directory"));
    }
    let text = fs::read_to_string(&path).map_err(|e| LabError::io(&path, e))?;
    let body = text
        .split_once(&format!("{CONFIG_MARKER}\n"))
        .and_then(|(_, rest)| rest.split_once(ARTIFACTS_MARKER))
        .map(|(cfg, _)| cfg)
        .ok_or_else(|| LabError::io(&path, "missing config section"))?;
    ExperimentConfig::parse(body).map_err(|e| LabError::io(&path, e))
}
