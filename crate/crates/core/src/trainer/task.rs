//! Synthetic tasks and their losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Stream ids keep the training stream and the held-out set independent.
const TRAIN_STREAM: u64 = 0;
const EVAL_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// `½‖ŷ − y‖²` averaged over the batch; reported metric is per-entry MSE.
    Mse,
    /// Softmax cross-entropy; reported metric is accuracy.
    CrossEntropy,
}

impl Loss {
    pub fn higher_is_better(self) -> bool {
        matches!(self, Loss::CrossEntropy)
    }

    /// Mean loss over the batch and `∂loss/∂pred`.
    pub fn value_and_grad<T: Scalar>(self, pred: &Matrix<T>, target: &Matrix<T>) -> Result<(f64, Matrix<T>)> {
        let diff = pred.sub(target)?;
        let n = T::lit(pred.rows() as f64);
        match self {
            Loss::Mse => {
                let sq: T = diff.as_slice().iter().map(|&v| v * v).sum();
                Ok(((sq / (n + n)).to_f64_lossy(), diff.div_scalar(n)?))
            }
            Loss::CrossEntropy => {
                let probs = softmax_rows(pred);
                let mut total = T::zero();
                for i in 0..pred.rows() {
                    let k = argmax(target.row(i));
                    total -= probs.get(i, k).max(T::min_positive_value()).ln();
                }
                let grad = probs.sub(target)?.div_scalar(n)?;
                Ok(((total / n).to_f64_lossy(), grad))
            }
        }
    }

    /// Per-entry MSE, or classification accuracy.
    pub fn metric<T: Scalar>(self, pred: &Matrix<T>, target: &Matrix<T>) -> Result<f64> {
        match self {
            Loss::Mse => {
                let diff = pred.sub(target)?;
                let sq: T = diff.as_slice().iter().map(|&v| v * v).sum();
                Ok(sq.to_f64_lossy() / (pred.rows() * pred.cols()) as f64)
            }
            Loss::CrossEntropy => {
                if pred.shape() != target.shape() {
                    return Err(Error::shape("accuracy", pred.shape(), target.shape()));
                }
                let hits = (0..pred.rows())
                    .filter(|&i| argmax(pred.row(i)) == argmax(target.row(i)))
                    .count();
                Ok(hits as f64 / pred.rows() as f64)
            }
        }
    }
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

fn softmax_rows<T: Scalar>(logits: &Matrix<T>) -> Matrix<T> {
    let mut out = logits.clone();
    let cols = logits.cols();
    for row in out.as_mut_slice().chunks_mut(cols) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Target function of a task. Projections are `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskKind {
    /// `y = sin(ω · P · x)`
    Sine { omega: f64, projection: Matrix<f64> },
    /// `y = P · x`
    Linear { projection: Matrix<f64> },
    /// One-hot of `argmax(P · x)`.
    Classification { projection: Matrix<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub loss: Loss,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Seeds both the training stream and the held-out set.
    pub seed: u64,
    /// Train on a fixed pool of this many samples, cycled in order, instead
    /// of a fresh stream.
    pub train_pool: Option<usize>,
}

fn gaussian_projection(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (cols as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    })
}

impl TaskSpec {
    fn with_kind(name: &str, kind: TaskKind, loss: Loss, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            kind,
            loss,
            steps: 2000,
            learning_rate: 1e-3,
            batch_size: 8,
            seed,
            train_pool: None,
        }
    }

    /// Regression onto `sin(ω·P·x)` with a fresh Gaussian projection drawn from `seed`.
    pub fn sine(name: &str, input_dim: usize, output_dim: usize, omega: f64, seed: u64) -> Self {
        let projection = gaussian_projection(output_dim, input_dim, seed);
        Self::with_kind(name, TaskKind::Sine { omega, projection }, Loss::Mse, seed)
    }

    pub fn linear(name: &str, input_dim: usize, output_dim: usize, seed: u64) -> Self {
        let projection = gaussian_projection(output_dim, input_dim, seed);
        Self::with_kind(name, TaskKind::Linear { projection }, Loss::Mse, seed)
    }

    pub fn classification(name: &str, input_dim: usize, classes: usize, seed: u64) -> Self {
        let projection = gaussian_projection(classes, input_dim, seed);
        Self::with_kind(name, TaskKind::Classification { projection }, Loss::CrossEntropy, seed)
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self
    }

    pub fn with_train_pool(mut self, pool: usize) -> Self {
        self.train_pool = Some(pool);
        self
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }

    fn projection(&self) -> &Matrix<f64> {
        match &self.kind {
            TaskKind::Sine { projection, .. }
            | TaskKind::Linear { projection }
            | TaskKind::Classification { projection } => projection,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.projection().cols()
    }

    pub fn output_dim(&self) -> usize {
        self.projection().rows()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "task {}: learning rate must be a non-negative finite number",
                self.name
            )));
        }
        if self.batch_size == 0 || self.batch_size > 16 {
            return Err(Error::Config(format!(
                "task {}: batch size must be in 1..=16, got {}",
                self.name, self.batch_size
            )));
        }
        if self.train_pool == Some(0) {
            return Err(Error::Config(format!(
                "task {}: training pool must be non-empty",
                self.name
            )));
        }
        Ok(())
    }

    fn target(&self, x: &[f64]) -> Vec<f64> {
        let p = self.projection();
        let px: Vec<f64> = (0..p.rows())
            .map(|i| p.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        match &self.kind {
            TaskKind::Sine { omega, .. } => px.iter().map(|v| (omega * v).sin()).collect(),
            TaskKind::Linear { .. } => px,
            TaskKind::Classification { .. } => {
                let k = argmax(&px);
                (0..px.len()).map(|i| if i == k { 1.0 } else { 0.0 }).collect()
            }
        }
    }

    fn draw<T: Scalar>(&self, rng: &mut ChaCha8Rng, n: usize) -> (Matrix<T>, Matrix<T>) {
        let (din, dout) = (self.input_dim(), self.output_dim());
        let mut xs = Vec::with_capacity(n * din);
        let mut ys = Vec::with_capacity(n * dout);
        for _ in 0..n {
            let x: Vec<f64> = (0..din).map(|_| StandardNormal.sample(&mut *rng)).collect();
            ys.extend(self.target(&x).into_iter().map(T::lit));
            xs.extend(x.into_iter().map(T::lit));
        }
        (
            Matrix::new(n, din, xs).expect("positive batch"),
            Matrix::new(n, dout, ys).expect("positive batch"),
        )
    }

    pub fn sampler(&self) -> TaskSampler<'_> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(TRAIN_STREAM);
        let pool = self.train_pool.map(|n| self.draw::<f64>(&mut rng, n));
        TaskSampler {
            task: self,
            rng,
            pool,
            cursor: 0,
        }
    }

    /// Held-out inputs and targets, disjoint in stream from [`sampler`](Self::sampler).
    pub fn eval_set<T: Scalar>(&self, n: usize) -> (Matrix<T>, Matrix<T>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(EVAL_STREAM);
        self.draw(&mut rng, n)
    }
}

/// Deterministic stream of training batches.
pub struct TaskSampler<'a> {
    task: &'a TaskSpec,
    rng: ChaCha8Rng,
    pool: Option<(Matrix<f64>, Matrix<f64>)>,
    cursor: usize,
}

impl TaskSampler<'_> {
    pub fn next_batch<T: Scalar>(&mut self) -> (Matrix<T>, Matrix<T>) {
        let Some((px, py)) = &self.pool else {
            return self.task.draw(&mut self.rng, self.task.batch_size);
        };
        let n = px.rows();
        let rows: Vec<usize> = (0..self.task.batch_size).map(|i| (self.cursor + i) % n).collect();
        self.cursor = (self.cursor + self.task.batch_size) % n;
        (
            px.select_rows(&rows).expect("pool rows").cast(),
            py.select_rows(&rows).expect("pool rows").cast(),
        )
    }
}
