//! TOML run configuration.
//!
//! ```toml
//! name = "extreme"
//! methods = ["SECURA_M1", "LORA", "SEQ"]
//! seeds = [0, 1, 2, 3, 4]
//!
//! [model]
//! layers = 2        # hidden layers
//! width = 32
//! input = 16
//! output = 8
//!
//! [adapter]
//! r = 2             # or r_fraction = 0.1; m defaults to ⌈4r/3⌉
//!
//! [smagnorm]
//! epsilon = 1e-8
//! scale = 12.0
//!
//! [merge]
//! fusion_interval = 1
//!
//! [schedule]
//! name = "extreme"  # extreme | retention | classification
//! learning_rate = 1e-3
//! steps_per_task = 2000
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::metrics::DriftNorm;
use crate::smagnorm::SMagNormConfig;
use crate::trainer::{derive_seed, Activation, ContinualSchedule, Method, MethodConfig, ModelSpec, RankSpec, TaskSpec};

/// A config problem tied to the offending key.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn field_err(field: impl Into<String>, message: impl Into<String>) -> FieldError {
    FieldError {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run directory name; defaults to the config file stem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub adapter: AdapterSection,
    #[serde(default)]
    pub smagnorm: SMagNormSection,
    #[serde(default)]
    pub merge: MergeSection,
    pub schedule: ScheduleSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub layers: usize,
    pub width: usize,
    pub input: usize,
    pub output: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            layers: 2,
            width: 32,
            input: 16,
            output: 8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SMagNormSection {
    pub epsilon: f64,
    pub scale: f64,
    pub detach_gradient: bool,
}

impl Default for SMagNormSection {
    fn default() -> Self {
        let d = SMagNormConfig::<f64>::default();
        Self {
            epsilon: d.epsilon,
            scale: d.scale,
            detach_gradient: d.detach_gradient,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeSection {
    pub fusion_interval: usize,
}

impl Default for MergeSection {
    fn default() -> Self {
        Self { fusion_interval: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Pretrain on a sine probe task, then two fresh sine tasks at lr 1e-3.
    Extreme,
    /// Same shape at lr 1e-5.
    Retention,
    /// Pretrain and tasks are classification problems; probe metric is accuracy.
    Classification,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Extreme => "extreme",
            ScheduleKind::Retention => "retention",
            ScheduleKind::Classification => "classification",
        }
    }

    pub fn default_learning_rate(self) -> f64 {
        match self {
            ScheduleKind::Retention => 1e-5,
            _ => 1e-3,
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "extreme" => Ok(ScheduleKind::Extreme),
            "retention" => Ok(ScheduleKind::Retention),
            "classification" => Ok(ScheduleKind::Classification),
            _ => Err(format!(
                "unknown schedule {s:?} (expected extreme, retention or classification)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default = "default_steps")]
    pub steps_per_task: usize,
    #[serde(default = "default_tasks")]
    pub tasks: usize,
    #[serde(default = "default_pretrain_steps")]
    pub pretrain_steps: usize,
    #[serde(default = "default_pretrain_lr")]
    pub pretrain_learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_omega")]
    pub omega: f64,
    #[serde(default = "default_eval")]
    pub eval_samples: usize,
    #[serde(default = "default_drift")]
    pub drift_norm: String,
}

fn default_steps() -> usize {
    2000
}
fn default_tasks() -> usize {
    2
}
fn default_pretrain_steps() -> usize {
    4000
}
fn default_pretrain_lr() -> f64 {
    0.05
}
fn default_batch() -> usize {
    8
}
fn default_omega() -> f64 {
    1.0
}
fn default_eval() -> usize {
    256
}
fn default_drift() -> String {
    "nuclear".into()
}

impl ScheduleSection {
    pub fn new(kind: ScheduleKind) -> Self {
        Self {
            name: kind.name().into(),
            learning_rate: None,
            steps_per_task: default_steps(),
            tasks: default_tasks(),
            pretrain_steps: default_pretrain_steps(),
            pretrain_learning_rate: default_pretrain_lr(),
            batch_size: default_batch(),
            omega: default_omega(),
            eval_samples: default_eval(),
            drift_norm: default_drift(),
        }
    }
}

/// A config after validation, with parsed enums and per-method settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub raw: ExperimentConfig,
    pub methods: Vec<Method>,
    pub kind: ScheduleKind,
    pub learning_rate: f64,
    pub drift_norm: DriftNorm,
    pub model: ModelSpec,
    pub method_config: MethodConfig<f64>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, FieldError> {
        toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map(|s| text[s].lines().next().unwrap_or("").trim().to_string())
                .filter(|s| !s.is_empty())
                .unwrap_or_else(|| "config".to_string());
            field_err(field, e.message().to_string())
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve(&self) -> Result<ResolvedConfig, FieldError> {
        if self.methods.is_empty() {
            return Err(field_err("methods", "at least one method is required"));
        }
        let mut methods = Vec::new();
        for (i, m) in self.methods.iter().enumerate() {
            let method: Method = m
                .parse()
                .map_err(|e: crate::Error| field_err(format!("methods[{i}]"), e.to_string()))?;
            if methods.contains(&method) {
                return Err(field_err(format!("methods[{i}]"), format!("duplicate method {method}")));
            }
            methods.push(method);
        }
        if self.seeds.is_empty() {
            return Err(field_err("seeds", "at least one seed is required"));
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(field_err(format!("seeds[{i}]"), format!("duplicate seed {s}")));
            }
        }
        if let Some(name) = &self.name {
            if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
                return Err(field_err("name", "must be a plain directory name"));
            }
        }

        let m = &self.model;
        for (key, v) in [
            ("model.width", m.width),
            ("model.input", m.input),
            ("model.output", m.output),
        ] {
            if v == 0 {
                return Err(field_err(key, "must be positive"));
            }
        }
        let mut dims = vec![m.input];
        dims.extend(std::iter::repeat_n(m.width, m.layers));
        dims.push(m.output);

        let a = &self.adapter;
        let ranks = match (a.r, a.r_fraction) {
            (Some(_), Some(_)) => return Err(field_err("adapter.r_fraction", "give either r or r_fraction, not both")),
            (Some(r), None) => {
                if r == 0 {
                    return Err(field_err("adapter.r", "must be positive"));
                }
                let m = a.m.unwrap_or((4 * r).div_ceil(3));
                if m <= r {
                    return Err(field_err("adapter.m", format!("must exceed r = {r}")));
                }
                RankSpec::Fixed { r, m }
            }
            (None, Some(f)) => {
                if !(f > 0.0 && f <= 0.5) {
                    return Err(field_err("adapter.r_fraction", format!("{f} is outside (0, 0.5]")));
                }
                if a.m.is_some() {
                    return Err(field_err("adapter.m", "m is derived from r_fraction; set r instead"));
                }
                RankSpec::Fraction(f)
            }
            (None, None) => {
                if a.m.is_some() {
                    return Err(field_err("adapter.m", "m needs an explicit r"));
                }
                RankSpec::Default
            }
        };

        let sm = &self.smagnorm;
        if !(sm.epsilon > 0.0 && sm.epsilon.is_finite()) {
            return Err(field_err("smagnorm.epsilon", "must be positive and finite"));
        }
        if !(sm.scale > 0.0 && sm.scale.is_finite()) {
            return Err(field_err("smagnorm.scale", "must be positive and finite"));
        }
        if self.merge.fusion_interval == 0 {
            return Err(field_err("merge.fusion_interval", "must be at least 1"));
        }

        let s = &self.schedule;
        let kind: ScheduleKind = s.name.parse().map_err(|e| field_err("schedule.name", e))?;
        let learning_rate = s.learning_rate.unwrap_or(kind.default_learning_rate());
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(field_err("schedule.learning_rate", "must be positive and finite"));
        }
        if !(s.pretrain_learning_rate > 0.0 && s.pretrain_learning_rate.is_finite()) {
            return Err(field_err(
                "schedule.pretrain_learning_rate",
                "must be positive and finite",
            ));
        }
        if s.steps_per_task == 0 {
            return Err(field_err("schedule.steps_per_task", "must be positive"));
        }
        if s.tasks == 0 {
            return Err(field_err("schedule.tasks", "must be positive"));
        }
        if !(1..=16).contains(&s.batch_size) {
            return Err(field_err("schedule.batch_size", "must be in 1..=16"));
        }
        if s.eval_samples == 0 {
            return Err(field_err("schedule.eval_samples", "must be positive"));
        }
        if !s.omega.is_finite() {
            return Err(field_err("schedule.omega", "must be finite"));
        }
        if kind == ScheduleKind::Classification && m.output < 2 {
            return Err(field_err("model.output", "classification needs at least 2 classes"));
        }
        let drift_norm: DriftNorm = s
            .drift_norm
            .parse()
            .map_err(|e: crate::Error| field_err("schedule.drift_norm", e.to_string()))?;

        Ok(ResolvedConfig {
            raw: self.clone(),
            methods,
            kind,
            learning_rate,
            drift_norm,
            model: ModelSpec {
                dims,
                hidden_activation: Activation::Tanh,
            },
            method_config: MethodConfig {
                ranks,
                smagnorm: SMagNormConfig {
                    epsilon: sm.epsilon,
                    scale: sm.scale,
                    detach_gradient: sm.detach_gradient,
                },
                fusion_interval: self.merge.fusion_interval,
            },
        })
    }
}

impl ResolvedConfig {
    /// The task sequence for one seed. Tasks depend on the seed only, never
    /// on the method, so every method sees the same data.
    pub fn schedule(&self, seed: u64) -> ContinualSchedule {
        let s = &self.raw.schedule;
        let (input, output) = (self.model.dims[0], *self.model.dims.last().unwrap());
        let task = |name: &str, tag: u64| {
            let task_seed = derive_seed(seed, &[tag]);
            let spec = match self.kind {
                ScheduleKind::Classification => TaskSpec::classification(name, input, output, task_seed),
                _ => TaskSpec::sine(name, input, output, s.omega, task_seed),
            };
            spec.with_batch_size(s.batch_size)
        };
        let probe = task("F", 0);
        ContinualSchedule {
            name: self.kind.name().into(),
            pretrain: (s.pretrain_steps > 0).then(|| {
                probe
                    .clone()
                    .with_steps(s.pretrain_steps)
                    .with_learning_rate(s.pretrain_learning_rate)
            }),
            tasks: (0..s.tasks)
                .map(|i| {
                    let name = ((b'A' + (i % 26) as u8) as char).to_string();
                    task(&name, i as u64 + 1)
                        .with_steps(s.steps_per_task)
                        .with_learning_rate(self.learning_rate)
                })
                .collect(),
            probe,
            probe_task: None,
            boundary_fusion: true,
            eval_samples: s.eval_samples,
            drift_norm: self.drift_norm,
        }
    }
}
