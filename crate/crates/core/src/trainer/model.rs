//! Stack of adapted linear layers with exact reverse-mode gradients.
//!
//! Inputs are row vectors: a batch `X` (n×in) maps to `act(X·W_eff + bias)`,
//! so a layer weight is `in × out`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapters::{cabr_init, curlora_init, default_ranks, lora_init, Adapter};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::merge::{force_merge, fusion_tick, MergeEvent, MergeState, MergeStrategy};
use crate::scalar::Scalar;
use crate::smagnorm::{apply_smagnorm, backprop, SMagNormConfig, SMagNormTrace};

use super::derive_seed;

/// Training strategy applied to every layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    SecuraM1,
    SecuraM2,
    Lora,
    CurLora,
    /// Full fine-tuning of the base weights.
    Seq,
    /// CABR with M1 merging and no S-MagNorm.
    Cabr,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::SecuraM1,
        Method::SecuraM2,
        Method::Lora,
        Method::CurLora,
        Method::Seq,
        Method::Cabr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SecuraM1 => "SECURA_M1",
            Method::SecuraM2 => "SECURA_M2",
            Method::Lora => "LORA",
            Method::CurLora => "CURLORA",
            Method::Seq => "SEQ",
            Method::Cabr => "CABR",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// How adapter ranks are chosen per layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankSpec {
    /// `r = max(2, ⌈0.05·min(h, d)⌉)`, `m = ⌈4r/3⌉`.
    Default,
    /// `r = ⌈f·min(h, d)⌉`, `m = ⌈4r/3⌉` (clamped to the layer).
    Fraction(f64),
    Fixed {
        r: usize,
        m: usize,
    },
}

impl RankSpec {
    pub fn ranks(&self, h: usize, d: usize) -> (usize, usize) {
        let (r, m) = match *self {
            RankSpec::Default => default_ranks(h, d),
            RankSpec::Fraction(f) => {
                let r = ((f * h.min(d) as f64).ceil() as usize).max(1);
                (r, (4 * r).div_ceil(3))
            }
            RankSpec::Fixed { r, m } => (r, m),
        };
        let r = r.min(h.min(d));
        (r, m.min(d).max(r + 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodConfig<T> {
    pub ranks: RankSpec,
    pub smagnorm: SMagNormConfig<T>,
    pub fusion_interval: usize,
}

impl<T: Scalar> Default for MethodConfig<T> {
    fn default() -> Self {
        Self {
            ranks: RankSpec::Default,
            smagnorm: SMagNormConfig::default(),
            fusion_interval: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(self, z: Matrix<T>) -> Matrix<T> {
        match self {
            Activation::Tanh => z.map(T::tanh),
            Activation::Identity => z,
        }
    }

    /// `∂L/∂z` from `∂L/∂y` and the activation output `y`.
    fn backprop<T: Scalar>(self, grad_out: &Matrix<T>, out: &Matrix<T>) -> Result<Matrix<T>> {
        match self {
            Activation::Tanh => grad_out.zip_map(out, "tanh backprop", |g, y| g * (T::one() - y * y)),
            Activation::Identity => Ok(grad_out.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Param {
    Base,
    CabrA,
    CabrB,
    LoraA,
    LoraB,
    CurU,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLayer<T> {
    /// `in × out`.
    pub w_base: Matrix<T>,
    /// Length `out`; never trained.
    pub bias: Vec<T>,
    pub adapter: Adapter<T>,
    pub merge_state: Option<MergeState<T>>,
    pub smagnorm: Option<SMagNormConfig<T>>,
    /// True for full fine-tuning (pretraining and SEQ).
    pub train_base: bool,
}

/// Weight a layer computes with, plus the S-MagNorm trace when one was applied.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveWeight<T> {
    pub weight: Matrix<T>,
    pub trace: Option<SMagNormTrace<T>>,
}

impl<T: Scalar> AdaptedLayer<T> {
    pub fn new(w_base: Matrix<T>, bias: Vec<T>) -> Result<Self> {
        if bias.len() != w_base.cols() {
            return Err(Error::shape("layer bias", w_base.shape(), (1, bias.len())));
        }
        Ok(Self {
            w_base,
            bias,
            adapter: Adapter::None,
            merge_state: None,
            smagnorm: None,
            train_base: true,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.w_base.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w_base.cols()
    }

    /// Live adapter delta plus any M2 accumulator term.
    pub fn total_delta(&self) -> Option<Matrix<T>> {
        match (&self.adapter, &self.merge_state) {
            (Adapter::Cabr(a), Some(state)) => Some(state.total_delta(a)),
            (adapter, _) => adapter.materialize_delta(),
        }
    }

    pub fn effective_weight(&self) -> Result<EffectiveWeight<T>> {
        let delta = self.total_delta();
        match (&self.smagnorm, delta) {
            (Some(cfg), delta) => {
                let delta = delta.unwrap_or_else(|| Matrix::zeros(self.in_dim(), self.out_dim()));
                let trace = apply_smagnorm(&self.w_base, &delta, cfg)?;
                Ok(EffectiveWeight {
                    weight: trace.updated.clone(),
                    trace: Some(trace),
                })
            }
            (None, Some(delta)) => Ok(EffectiveWeight {
                weight: self.w_base.add(&delta)?,
                trace: None,
            }),
            (None, None) => Ok(EffectiveWeight {
                weight: self.w_base.clone(),
                trace: None,
            }),
        }
    }

    pub fn trainable_params(&self) -> Vec<Param> {
        let mut out = Vec::new();
        if self.train_base {
            out.push(Param::Base);
        }
        match &self.adapter {
            Adapter::None => {}
            Adapter::Lora(_) => out.extend([Param::LoraA, Param::LoraB]),
            Adapter::CurLora(_) => out.push(Param::CurU),
            Adapter::Cabr(_) => out.extend([Param::CabrA, Param::CabrB]),
        }
        out
    }

    pub fn param(&self, p: Param) -> Option<&Matrix<T>> {
        match (p, &self.adapter) {
            (Param::Base, _) => Some(&self.w_base),
            (Param::CabrA, Adapter::Cabr(a)) => Some(&a.w_a),
            (Param::CabrB, Adapter::Cabr(a)) => Some(&a.w_b),
            (Param::LoraA, Adapter::Lora(a)) => Some(&a.a),
            (Param::LoraB, Adapter::Lora(a)) => Some(&a.b),
            (Param::CurU, Adapter::CurLora(a)) => Some(&a.u),
            _ => None,
        }
    }

    pub fn param_mut(&mut self, p: Param) -> Option<&mut Matrix<T>> {
        match (p, &mut self.adapter) {
            (Param::Base, _) => Some(&mut self.w_base),
            (Param::CabrA, Adapter::Cabr(a)) => Some(&mut a.w_a),
            (Param::CabrB, Adapter::Cabr(a)) => Some(&mut a.w_b),
            (Param::LoraA, Adapter::Lora(a)) => Some(&mut a.a),
            (Param::LoraB, Adapter::Lora(a)) => Some(&mut a.b),
            (Param::CurU, Adapter::CurLora(a)) => Some(&mut a.u),
            _ => None,
        }
    }

    /// Maps `∂L/∂W_eff` to gradients of this layer's trainables.
    fn param_grads(&self, eff: &EffectiveWeight<T>, grad_w: &Matrix<T>) -> Result<Vec<(Param, Matrix<T>)>> {
        let grad_delta = match (&eff.trace, &self.smagnorm) {
            (Some(trace), Some(cfg)) => backprop(trace, &self.w_base, grad_w, cfg)?,
            _ => grad_w.clone(),
        };
        let mut out = Vec::new();
        for p in self.trainable_params() {
            let g = match (&self.adapter, p) {
                (_, Param::Base) => grad_delta.clone(),
                (Adapter::Cabr(a), Param::CabrA) => {
                    // ∂/∂A of C·A·B·R = Cᵀ·G·(B·R)ᵀ
                    let br = a.w_b.matmul(a.r_mat())?;
                    a.c().t_matmul(&grad_delta)?.matmul_t(&br)?
                }
                (Adapter::Cabr(a), Param::CabrB) => {
                    let ca = a.c().matmul(&a.w_a)?;
                    ca.t_matmul(&grad_delta)?.matmul_t(a.r_mat())?
                }
                (Adapter::Lora(a), Param::LoraA) => grad_delta.matmul_t(&a.b)?.scale(a.scaling),
                (Adapter::Lora(a), Param::LoraB) => a.a.t_matmul(&grad_delta)?.scale(a.scaling),
                (Adapter::CurLora(a), Param::CurU) => {
                    a.selection.c.t_matmul(&grad_delta)?.matmul_t(&a.selection.r_mat)?
                }
                _ => unreachable!("trainable list matches adapter"),
            };
            out.push((p, g));
        }
        Ok(out)
    }

    /// Folds the live adapter delta into persistent state and zeroes it.
    pub fn boundary_fusion(&mut self) -> Result<Option<MergeEvent>> {
        let step = self.merge_state.as_ref().map_or(0, |s| s.step_counter);
        match (&mut self.adapter, &mut self.merge_state) {
            (Adapter::Cabr(a), Some(state)) => force_merge(state, a, &mut self.w_base).map(Some),
            (Adapter::Lora(a), _) => {
                let delta = a.materialize_delta();
                let delta_norm = delta.frobenius_norm().to_f64_lossy();
                self.w_base.axpy(T::one(), &delta)?;
                a.b.fill_zero();
                Ok(Some(MergeEvent {
                    step,
                    strategy: MergeStrategy::M1,
                    delta_norm,
                }))
            }
            (Adapter::CurLora(a), _) => {
                let delta = a.materialize_delta();
                let delta_norm = delta.frobenius_norm().to_f64_lossy();
                self.w_base.axpy(T::one(), &delta)?;
                a.u.fill_zero();
                Ok(Some(MergeEvent {
                    step,
                    strategy: MergeStrategy::M1,
                    delta_norm,
                }))
            }
            _ => Ok(None),
        }
    }
}

/// Activations recorded by [`Model::forward`] for a later [`Model::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    generation: u64,
    inputs: Vec<Matrix<T>>,
    outputs: Vec<Matrix<T>>,
    weights: Vec<EffectiveWeight<T>>,
}

impl<T> ForwardCache<T> {
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn weights(&self) -> &[EffectiveWeight<T>] {
        &self.weights
    }
}

/// Per-layer gradients, in the order of [`AdaptedLayer::trainable_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Vec<(Param, Matrix<T>)>>,
}

impl<T: Scalar> Gradients<T> {
    /// Frobenius norm over every trainable gradient.
    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flatten()
            .map(|(_, g)| g.as_slice().iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn get(&self, layer: usize, p: Param) -> Option<&Matrix<T>> {
        self.layers.get(layer)?.iter().find(|(q, _)| *q == p).map(|(_, g)| g)
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().flatten().all(|(_, g)| g.is_zero())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub layers: Vec<AdaptedLayer<T>>,
    /// Activation of every layer but the last, which is linear.
    pub hidden_activation: Activation,
    pub method: Option<Method>,
    generation: u64,
}

impl<T: Scalar> Model<T> {
    pub fn from_layers(layers: Vec<AdaptedLayer<T>>, hidden_activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("model layers"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    "layer chaining",
                    pair[0].w_base.shape(),
                    pair[1].w_base.shape(),
                ));
            }
        }
        Ok(Self {
            layers,
            hidden_activation,
            method: None,
            generation: 0,
        })
    }

    /// Uniform Glorot initialization `±√(6/(in+out))`, small uniform biases.
    pub fn new(dims: &[usize], hidden_activation: Activation, seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!(
                "model dims {dims:?} need at least two positive widths"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                let weight = Matrix::from_fn(w[0], w[1], |_, _| T::lit(rng.random_range(-limit..limit)));
                let bias = (0..w[1]).map(|_| T::lit(rng.random_range(-0.1..0.1))).collect();
                AdaptedLayer::new(weight, bias)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers, hidden_activation)
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Marks every outstanding [`ForwardCache`] stale.
    pub fn touch(&mut self) {
        self.generation += 1;
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Replaces full fine-tuning with `method` on every layer. Adapters are
    /// initialized from the current base weights.
    pub fn attach(&mut self, method: Method, config: &MethodConfig<T>, seed: u64) -> Result<()> {
        if self.method.is_some() {
            return Err(Error::Contract("a method is already attached".into()));
        }
        config.smagnorm.validate()?;
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            let (h, d) = layer.w_base.shape();
            let (r, m) = config.ranks.ranks(h, d);
            layer.train_base = method == Method::Seq;
            layer.smagnorm = None;
            layer.merge_state = None;
            layer.adapter = match method {
                Method::Seq => Adapter::None,
                Method::Lora => Adapter::Lora(lora_init(h, d, r, derive_seed(seed, &[idx as u64]))?),
                Method::CurLora => Adapter::CurLora(curlora_init(&layer.w_base, r)?),
                Method::SecuraM1 | Method::SecuraM2 | Method::Cabr => {
                    let a = cabr_init(&layer.w_base, r, m)?;
                    let strategy = if method == Method::SecuraM2 {
                        MergeStrategy::M2
                    } else {
                        MergeStrategy::M1
                    };
                    layer.merge_state = Some(MergeState::new(strategy, config.fusion_interval, &a)?);
                    if method != Method::Cabr {
                        layer.smagnorm = Some(config.smagnorm);
                    }
                    Adapter::Cabr(a)
                }
            };
        }
        self.method = Some(method);
        self.touch();
        Ok(())
    }

    pub fn effective_weights(&self) -> Result<Vec<EffectiveWeight<T>>> {
        self.layers.iter().map(AdaptedLayer::effective_weight).collect()
    }

    fn activation(&self, idx: usize) -> Activation {
        if idx + 1 == self.layers.len() {
            Activation::Identity
        } else {
            self.hidden_activation
        }
    }

    /// Batch forward pass; rows of `x` are samples.
    pub fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, ForwardCache<T>)> {
        let weights = self.effective_weights()?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (idx, (layer, eff)) in self.layers.iter().zip(&weights).enumerate() {
            let mut z = h.matmul(&eff.weight)?;
            for row in z.as_mut_slice().chunks_mut(layer.out_dim()) {
                for (v, &b) in row.iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let y = self.activation(idx).apply(z);
            inputs.push(h);
            h = y.clone();
            outputs.push(y);
        }
        Ok((
            h,
            ForwardCache {
                generation: self.generation,
                inputs,
                outputs,
                weights,
            },
        ))
    }

    /// Forward pass without keeping activations.
    pub fn predict(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.forward(x)?.0)
    }

    pub fn backward(&self, cache: &ForwardCache<T>, loss_grad: &Matrix<T>) -> Result<Gradients<T>> {
        if cache.generation != self.generation {
            return Err(Error::Contract(format!(
                "stale forward cache (generation {} vs model {})",
                cache.generation, self.generation
            )));
        }
        let n = self.layers.len();
        let mut layers = vec![Vec::new(); n];
        let mut grad = loss_grad.clone();
        for idx in (0..n).rev() {
            let dz = self.activation(idx).backprop(&grad, &cache.outputs[idx])?;
            let eff = &cache.weights[idx];
            let grad_w = cache.inputs[idx].t_matmul(&dz)?;
            layers[idx] = self.layers[idx].param_grads(eff, &grad_w)?;
            if idx > 0 {
                grad = dz.matmul_t(&eff.weight)?;
            }
        }
        Ok(Gradients { layers })
    }

    /// `θ ← θ − lr·g` for every gradient entry.
    pub fn sgd_step(&mut self, grads: &Gradients<T>, learning_rate: T) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Contract("gradient layer count differs from model".into()));
        }
        for (layer, gs) in self.layers.iter_mut().zip(&grads.layers) {
            for (p, g) in gs {
                let theta = layer
                    .param_mut(*p)
                    .ok_or_else(|| Error::Contract(format!("layer has no parameter {p:?}")))?;
                sgd_update(theta, g, learning_rate)?;
            }
        }
        self.touch();
        Ok(())
    }

    /// Advances every merge state by one step and merges where due.
    pub fn fusion_tick(&mut self) -> Result<Vec<(usize, MergeEvent)>> {
        let mut events = Vec::new();
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            if let (Adapter::Cabr(a), Some(state)) = (&mut layer.adapter, &mut layer.merge_state) {
                state.advance();
                if let Some(ev) = fusion_tick(state, a, &mut layer.w_base)? {
                    events.push((idx, ev));
                }
            }
        }
        if !events.is_empty() {
            self.touch();
        }
        Ok(events)
    }

    pub fn boundary_fusion(&mut self) -> Result<Vec<(usize, MergeEvent)>> {
        let mut events = Vec::new();
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            if let Some(ev) = layer.boundary_fusion()? {
                events.push((idx, ev));
            }
        }
        self.touch();
        Ok(events)
    }

    pub fn trainable_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let base = if l.train_base {
                    l.w_base.rows() * l.w_base.cols()
                } else {
                    0
                };
                base + l.adapter.trainable_params()
            })
            .sum()
    }
}

pub fn sgd_update<T: Scalar>(theta: &mut Matrix<T>, grad: &Matrix<T>, learning_rate: T) -> Result<()> {
    theta.axpy(-learning_rate, grad)
}
