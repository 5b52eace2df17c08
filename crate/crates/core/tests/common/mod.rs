#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use secura::adapters::Adapter;
use secura::merge::merge_m2;
use secura::smagnorm::SMagNormConfig;
use secura::trainer::{Activation, AdaptedLayer, Method, MethodConfig, Model, Param};
use secura::Matrix;

pub fn random(rows: usize, cols: usize, seed: u64, scale: f64) -> Matrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| scale * rng.random_range(-1.0..1.0))
}

type Grid = Vec<Vec<f64>>;

fn to_grid(m: &Matrix<f64>) -> Grid {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn chain(mats: &[&Grid]) -> Grid {
    let mut acc = mats[0].clone();
    for m in &mats[1..] {
        let mut next = vec![vec![0.0; m[0].len()]; acc.len()];
        for i in 0..acc.len() {
            for k in 0..m.len() {
                for j in 0..m[0].len() {
                    next[i][j] += acc[i][k] * m[k][j];
                }
            }
        }
        acc = next;
    }
    acc
}

/// Adapter delta of one layer, rebuilt from its parameters with plain loops.
pub fn loop_delta(layer: &AdaptedLayer<f64>) -> Grid {
    let (h, d) = layer.w_base.shape();
    let mut delta = vec![vec![0.0; d]; h];
    let mut add = |g: Grid| {
        for i in 0..h {
            for j in 0..d {
                delta[i][j] += g[i][j];
            }
        }
    };
    match &layer.adapter {
        Adapter::None => {}
        Adapter::Lora(a) => {
            let prod = chain(&[&to_grid(&a.a), &to_grid(&a.b)]);
            add(prod
                .into_iter()
                .map(|r| r.into_iter().map(|v| v * a.scaling).collect())
                .collect());
        }
        Adapter::CurLora(a) => add(chain(&[
            &to_grid(&a.selection.c),
            &to_grid(&a.u),
            &to_grid(&a.selection.r_mat),
        ])),
        Adapter::Cabr(a) => {
            let c = to_grid(a.c());
            let r = to_grid(a.r_mat());
            add(chain(&[&c, &to_grid(&a.w_a), &to_grid(&a.w_b), &r]));
            if let Some(st) = &layer.merge_state {
                if let (Some(af), Some(bacc)) = (&st.a_frozen, &st.b_accum) {
                    add(chain(&[&c, &to_grid(af), &to_grid(bacc), &r]));
                }
            }
        }
    }
    delta
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// S-MagNorm restriction of `merged` against `base`, elementwise loops.
pub fn loop_restriction(base: &Grid, merged: &Grid, cfg: &SMagNormConfig<f64>) -> Grid {
    let mag: Grid = merged
        .iter()
        .zip(base)
        .map(|(mr, br)| mr.iter().zip(br).map(|(m, b)| (m / (b + cfg.epsilon)).abs()).collect())
        .collect();
    let mx = mag.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    mag.iter()
        .map(|r| {
            r.iter()
                .map(|v| 2.0 - sigmoid((v / (mx + cfg.epsilon) - 0.5) * cfg.scale))
                .collect()
        })
        .collect()
}

/// Effective weight per layer. With `frozen`, those restriction matrices are
/// used instead of recomputing them.
pub fn loop_effective(model: &Model<f64>, frozen: Option<&[Grid]>) -> Vec<Grid> {
    model
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let base = to_grid(&layer.w_base);
            let delta = loop_delta(layer);
            let merged: Grid = base
                .iter()
                .zip(&delta)
                .map(|(b, d)| b.iter().zip(d).map(|(x, y)| x + y).collect())
                .collect();
            match &layer.smagnorm {
                None => merged,
                Some(cfg) => {
                    let restr = match frozen {
                        Some(f) => f[l].clone(),
                        None => loop_restriction(&base, &merged, cfg),
                    };
                    merged
                        .iter()
                        .zip(&restr)
                        .map(|(m, r)| m.iter().zip(r).map(|(a, b)| a / b).collect())
                        .collect()
                }
            }
        })
        .collect()
}

/// `½‖ŷ − y‖²` averaged over rows, evaluated with scalar loops.
pub fn loop_loss(model: &Model<f64>, x: &Matrix<f64>, y: &Matrix<f64>, frozen: Option<&[Grid]>) -> f64 {
    let weights = loop_effective(model, frozen);
    let n = model.layers.len();
    let mut total = 0.0;
    for s in 0..x.rows() {
        let mut h = x.row(s).to_vec();
        for (l, (w, layer)) in weights.iter().zip(&model.layers).enumerate() {
            let mut z = layer.bias.clone();
            for (i, hi) in h.iter().enumerate() {
                for (j, zj) in z.iter_mut().enumerate() {
                    *zj += hi * w[i][j];
                }
            }
            if l + 1 < n && model.hidden_activation == Activation::Tanh {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = z;
        }
        total += h.iter().zip(y.row(s)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    total / (2.0 * x.rows() as f64)
}

/// Single adapted 8×6 layer with every trainable (and any M2 accumulator) nonzero.
pub fn gradient_fixture(method: Method, seed: u64, detach: bool) -> Model<f64> {
    let w = random(8, 6, seed, 1.0);
    let bias = random(1, 6, seed ^ 0xb1a5, 0.1).row(0).to_vec();
    let mut model = Model::from_layers(vec![AdaptedLayer::new(w, bias).unwrap()], Activation::Identity).unwrap();
    let mut cfg = MethodConfig::<f64>::default();
    cfg.smagnorm.detach_gradient = detach;
    model.attach(method, &cfg, seed).unwrap();
    let layer = &mut model.layers[0];
    if let (Adapter::Cabr(a), Some(st)) = (&mut layer.adapter, &mut layer.merge_state) {
        if method == Method::SecuraM2 {
            a.w_b = random(a.m(), a.r(), seed ^ 1, 0.3);
            merge_m2(st, a).unwrap();
        }
    }
    for p in layer.trainable_params() {
        let theta = layer.param_mut(p).unwrap();
        let (r, c) = theta.shape();
        let noise = random(r, c, seed ^ (p as u64 + 7), 0.3);
        if p == Param::Base || p == Param::CabrA || p == Param::LoraA {
            theta.axpy(1.0, &noise.scale(0.1)).unwrap();
        } else {
            *theta = noise;
        }
    }
    model.touch();
    model
}

/// Largest per-matrix relative error `‖analytic − fd‖ / max(‖analytic‖, ‖fd‖)`
/// over every trainable, using central differences with step `h`.
pub fn max_relative_error(model: &Model<f64>, x: &Matrix<f64>, y: &Matrix<f64>, h: f64) -> f64 {
    let (pred, cache) = model.forward(x).unwrap();
    let loss_grad = pred.sub(y).unwrap().div_scalar(x.rows() as f64).unwrap();
    let grads = model.backward(&cache, &loss_grad).unwrap();

    // Detached restriction: hold it at its current value during differencing.
    let frozen: Option<Vec<Grid>> = model
        .layers
        .iter()
        .any(|l| l.smagnorm.is_some_and(|c| c.detach_gradient))
        .then(|| {
            model
                .layers
                .iter()
                .map(|l| {
                    let base = to_grid(&l.w_base);
                    let delta = loop_delta(l);
                    let merged: Grid = base
                        .iter()
                        .zip(&delta)
                        .map(|(b, d)| b.iter().zip(d).map(|(x, y)| x + y).collect())
                        .collect();
                    loop_restriction(&base, &merged, l.smagnorm.as_ref().unwrap())
                })
                .collect()
        });

    let mut worst: f64 = 0.0;
    for (l, layer_grads) in grads.layers.iter().enumerate() {
        for (p, g) in layer_grads {
            let mut fd = Matrix::zeros(g.rows(), g.cols());
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    let mut probe = model.clone();
                    let theta = probe.layers[l].param_mut(*p).unwrap();
                    let v = theta.get(i, j);
                    theta.set(i, j, v + h);
                    let up = loop_loss(&probe, x, y, frozen.as_deref());
                    let theta = probe.layers[l].param_mut(*p).unwrap();
                    theta.set(i, j, v - h);
                    let dn = loop_loss(&probe, x, y, frozen.as_deref());
                    fd.set(i, j, (up - dn) / (2.0 * h));
                }
            }
            let scale = g.frobenius_norm().max(fd.frobenius_norm());
            if scale > 1e-12 {
                worst = worst.max(g.sub(&fd).unwrap().frobenius_norm() / scale);
            }
        }
    }
    worst
}
