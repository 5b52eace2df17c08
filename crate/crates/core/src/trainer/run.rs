//! Task training loop and sequential schedules.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::merge::MergeEvent;
use crate::metrics::{
    gradient_stats, retention_score, svd_norm_drift, DriftNorm, DriftRecord, GradStats, RetentionRecord,
};
use crate::scalar::Scalar;
use crate::smagnorm::RestrictionStats;

use super::model::{Activation, EffectiveWeight, Method, MethodConfig, Model};
use super::task::TaskSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskReport<T> {
    pub task: String,
    /// Training loss per step.
    pub losses: Vec<f64>,
    /// Frobenius norm of all trainable gradients per step.
    pub grad_norms: Vec<f64>,
    /// Restriction statistics per step, pooled over layers; empty without S-MagNorm.
    pub restriction: Vec<RestrictionStats>,
    pub merges: Vec<(usize, MergeEvent)>,
    pub base_before: Vec<Matrix<T>>,
    pub base_after: Vec<Matrix<T>>,
    pub effective_before: Vec<Matrix<T>>,
    pub effective_after: Vec<Matrix<T>>,
}

impl<T> TaskReport<T> {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

fn pooled_restriction<T: Scalar>(weights: &[EffectiveWeight<T>]) -> Option<RestrictionStats> {
    let mut pooled: Option<(RestrictionStats, usize)> = None;
    for trace in weights.iter().filter_map(|w| w.trace.as_ref()) {
        let s = trace.restriction_stats();
        let n = trace.restriction.rows() * trace.restriction.cols();
        pooled = Some(match pooled {
            None => (s, n),
            Some((p, pn)) => (
                RestrictionStats {
                    min: p.min.min(s.min),
                    max: p.max.max(s.max),
                    mean: (p.mean * pn as f64 + s.mean * n as f64) / (pn + n) as f64,
                },
                pn + n,
            ),
        });
    }
    pooled.map(|(s, _)| s)
}

fn effective<T: Scalar>(model: &Model<T>) -> Result<Vec<Matrix<T>>> {
    Ok(model.effective_weights()?.into_iter().map(|e| e.weight).collect())
}

/// Runs `task.steps` SGD steps, ticking the merge schedule after each.
pub fn train_task<T: Scalar>(model: &mut Model<T>, task: &TaskSpec) -> Result<TaskReport<T>> {
    task.validate()?;
    if task.input_dim() != model.input_dim() || task.output_dim() != model.output_dim() {
        return Err(Error::shape(
            "task vs model",
            (task.input_dim(), task.output_dim()),
            (model.input_dim(), model.output_dim()),
        ));
    }
    let lr = T::lit(task.learning_rate);
    let track_restriction = model.layers.iter().any(|l| l.smagnorm.is_some());
    let base_before = model.layers.iter().map(|l| l.w_base.clone()).collect();
    let effective_before = effective(model)?;
    let mut losses = Vec::with_capacity(task.steps);
    let mut grad_norms = Vec::with_capacity(task.steps);
    let mut restriction = Vec::new();
    let mut merges = Vec::new();
    let mut sampler = task.sampler();
    for step in 1..=task.steps {
        let (x, y) = sampler.next_batch::<T>();
        let (pred, cache) = model.forward(&x)?;
        let (loss, grad) = task.loss.value_and_grad(&pred, &y)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                context: format!("task {} loss {loss}", task.name),
            });
        }
        if track_restriction {
            restriction.extend(pooled_restriction(cache.weights()));
        }
        let grads = model.backward(&cache, &grad)?;
        let norm = grads.norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                step,
                context: format!("task {} gradient norm {norm}", task.name),
            });
        }
        losses.push(loss);
        grad_norms.push(norm);
        model.sgd_step(&grads, lr)?;
        merges.extend(model.fusion_tick()?);
    }
    Ok(TaskReport {
        task: task.name.clone(),
        losses,
        grad_norms,
        restriction,
        merges,
        base_before,
        base_after: model.layers.iter().map(|l| l.w_base.clone()).collect(),
        effective_before,
        effective_after: effective(model)?,
    })
}

/// Metric of `model` on the held-out set of `task`.
pub fn evaluate<T: Scalar>(model: &Model<T>, task: &TaskSpec, samples: usize) -> Result<f64> {
    let (x, y) = task.eval_set::<T>(samples);
    task.loss.metric(&model.predict(&x)?, &y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinualSchedule {
    pub name: String,
    /// Full fine-tuning of the base before any method is attached.
    pub pretrain: Option<TaskSpec>,
    pub tasks: Vec<TaskSpec>,
    /// Evaluated after every task, never trained directly.
    pub probe: TaskSpec,
    /// Task whose completion sets the retention reference; `None` uses the
    /// probe metric before the first task.
    pub probe_task: Option<usize>,
    /// Fold live adapter deltas into persistent state after each task.
    pub boundary_fusion: bool,
    pub eval_samples: usize,
    pub drift_norm: DriftNorm,
}

impl ContinualSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config(format!("schedule {}: no tasks", self.name)));
        }
        if let Some(i) = self.probe_task {
            if i >= self.tasks.len() {
                return Err(Error::Config(format!(
                    "schedule {}: probe task index {i} beyond {} tasks",
                    self.name,
                    self.tasks.len()
                )));
            }
        }
        if self.eval_samples == 0 {
            return Err(Error::Config(format!(
                "schedule {}: eval_samples must be positive",
                self.name
            )));
        }
        for t in self.pretrain.iter().chain(&self.tasks).chain([&self.probe]) {
            t.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinualReport<T> {
    pub method: String,
    pub task_reports: Vec<TaskReport<T>>,
    /// Each task's own held-out metric right after training it.
    pub task_metrics: Vec<f64>,
    pub probe_before: f64,
    pub probe_after: Vec<f64>,
    pub retention: RetentionRecord,
    /// Per task, one record per layer, on effective weights.
    pub drift: Vec<Vec<DriftRecord>>,
    /// Per task; `None` for zero-step tasks.
    pub grad_stats: Vec<Option<GradStats>>,
}

pub fn run_continual<T: Scalar>(model: &mut Model<T>, schedule: &ContinualSchedule) -> Result<ContinualReport<T>> {
    schedule.validate()?;
    let method = model.method.map_or("NONE", Method::name).to_string();
    let probe_before = evaluate(model, &schedule.probe, schedule.eval_samples)?;
    let mut task_reports = Vec::new();
    let mut task_metrics = Vec::new();
    let mut probe_after = Vec::new();
    let mut drift = Vec::new();
    let mut grad_stats = Vec::new();
    for task in &schedule.tasks {
        let mut report = train_task(model, task)?;
        if schedule.boundary_fusion {
            report.merges.extend(model.boundary_fusion()?);
            report.base_after = model.layers.iter().map(|l| l.w_base.clone()).collect();
            report.effective_after = effective(model)?;
        }
        task_metrics.push(evaluate(model, task, schedule.eval_samples)?);
        probe_after.push(evaluate(model, &schedule.probe, schedule.eval_samples)?);
        drift.push(
            report
                .effective_before
                .iter()
                .zip(&report.effective_after)
                .enumerate()
                .map(|(layer, (b, a))| svd_norm_drift(&method, layer, b, a, schedule.drift_norm))
                .collect::<Result<Vec<_>>>()?,
        );
        grad_stats.push(if report.grad_norms.is_empty() {
            None
        } else {
            Some(gradient_stats(&report.grad_norms)?)
        });
        task_reports.push(report);
    }
    let own = schedule.probe_task.map_or(probe_before, |i| probe_after[i]);
    let retention = retention_score(&method, own, &probe_after, schedule.probe.loss.higher_is_better())?;
    Ok(ContinualReport {
        method,
        task_reports,
        task_metrics,
        probe_before,
        probe_after,
        retention,
        drift,
        grad_stats,
    })
}

/// Model shape shared by every method in a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub dims: Vec<usize>,
    pub hidden_activation: Activation,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            dims: vec![16, 32, 32, 8],
            hidden_activation: Activation::Tanh,
        }
    }
}

/// Builds a model from `seed`, pretrains it, attaches `method` and runs the schedule.
///
/// The pretrained base depends only on the seed, so every method starts
/// from the same weights.
pub fn run_method<T: Scalar>(
    spec: &ModelSpec,
    method: Method,
    config: &MethodConfig<T>,
    schedule: &ContinualSchedule,
    seed: u64,
) -> Result<ContinualReport<T>> {
    let base = pretrained_model(spec, schedule, seed)?;
    run_method_from(&base, method, config, schedule, seed)
}

/// Seeded model after the schedule's pretraining task, before any method is attached.
pub fn pretrained_model<T: Scalar>(spec: &ModelSpec, schedule: &ContinualSchedule, seed: u64) -> Result<Model<T>> {
    let mut model = Model::<T>::new(&spec.dims, spec.hidden_activation, seed)?;
    if let Some(pre) = &schedule.pretrain {
        train_task(&mut model, pre)?;
    }
    Ok(model)
}

/// Like [`run_method`], starting from a copy of an already pretrained model.
pub fn run_method_from<T: Scalar>(
    pretrained: &Model<T>,
    method: Method,
    config: &MethodConfig<T>,
    schedule: &ContinualSchedule,
    seed: u64,
) -> Result<ContinualReport<T>> {
    let mut model = pretrained.clone();
    model.attach(method, config, seed)?;
    run_continual(&mut model, schedule)
}
