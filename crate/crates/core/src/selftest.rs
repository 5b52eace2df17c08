//! Fast built-in checks, run by `secura-lab selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapters::{cabr_init, curlora_init, lora_init, Adapter};
use crate::matrix::{svd, Matrix};
use crate::merge::{effective_weight, merge_m2, MergeState, MergeStrategy};
use crate::metrics::retention_score;
use crate::scalar::Scalar;
use crate::smagnorm::{apply_smagnorm, SMagNormConfig};
use crate::trainer::{Activation, AdaptedLayer, Loss, Method, MethodConfig, Model};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub result: Result<(), String>,
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn sigmoid_band() -> Result<(), String> {
    let lo = (-0.5f64).sigmoid();
    let hi = 0.5f64.sigmoid();
    let r4 = |v: f64| (v * 1e4).round() / 1e4;
    ensure(r4(lo) == 0.3775 && r4(hi) == 0.6225, || {
        format!("σ(±0.5) = [{lo}, {hi}]")
    })
}

fn restriction_in_open_band() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = SMagNormConfig::default();
    for _ in 0..200 {
        let base = random(6, 5, &mut rng);
        let delta = random(6, 5, &mut rng).scale(rng.random_range(0.0..3.0));
        let t = apply_smagnorm(&base, &delta, &cfg).map_err(|e| e.to_string())?;
        let (lo, hi) = (t.restriction.min(), t.restriction.max());
        ensure(lo > 1.0 && hi < 2.0, || format!("restriction spans [{lo}, {hi}]"))?;
    }
    Ok(())
}

fn zero_delta_identity() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let w = random(8, 6, &mut rng);
    let e = |e: crate::Error| e.to_string();
    let adapters = [
        Adapter::Cabr(cabr_init(&w, 2, 3).map_err(e)?),
        Adapter::Lora(lora_init(8, 6, 2, 5).map_err(e)?),
        Adapter::CurLora(curlora_init(&w, 2).map_err(e)?),
    ];
    for a in &adapters {
        let delta = a.materialize_delta().expect("adapter has a delta");
        ensure(w.add(&delta).map_err(e)? == w, || {
            format!("{} delta is not zero", a.family())
        })?;
    }
    let cfg = SMagNormConfig::default();
    let zero = Matrix::zeros(8, 6);
    let direct = apply_smagnorm(&w, &zero, &cfg).map_err(e)?.updated;
    let Adapter::Cabr(cabr) = &adapters[0] else {
        unreachable!()
    };
    let state = MergeState::new(MergeStrategy::M2, 1, cabr).map_err(e)?;
    ensure(effective_weight(&state, cabr, &w, &cfg).map_err(e)? == direct, || {
        "CABR effective weight differs from normalizing a zero delta".into()
    })
}

fn svd_reconstructs() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (r, c) in [(7, 4), (4, 7), (5, 5)] {
        let w = random(r, c, &mut rng);
        let s = svd(&w).map_err(|e| e.to_string())?;
        let err = s.reconstruct().sub(&w).map_err(|e| e.to_string())?.frobenius_norm();
        ensure(err < 1e-10, || format!("{r}x{c} reconstruction error {err:e}"))?;
        ensure(s.s.windows(2).all(|p| p[0] >= p[1]), || {
            "singular values not sorted".into()
        })?;
    }
    Ok(())
}

fn m2_merge_conserves_weight() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let e = |e: crate::Error| e.to_string();
    let w = random(8, 6, &mut rng);
    let cfg = SMagNormConfig::default();
    let mut a = cabr_init(&w, 2, 3).map_err(e)?;
    let mut state = MergeState::new(MergeStrategy::M2, 1, &a).map_err(e)?;
    a.w_a = random(2, 3, &mut rng);
    for _ in 0..3 {
        a.w_b = random(3, 2, &mut rng);
        let before = effective_weight(&state, &a, &w, &cfg).map_err(e)?;
        merge_m2(&mut state, &mut a).map_err(e)?;
        let after = effective_weight(&state, &a, &w, &cfg).map_err(e)?;
        let gap = before.sub(&after).map_err(e)?.frobenius_norm();
        ensure(gap <= 1e-12, || format!("effective weight moved by {gap:e}"))?;
    }
    Ok(())
}

/// Central differences on the actual loss. The restriction is attached here,
/// so the analytic gradient is the full derivative.
fn gradients_match_differences() -> Result<(), String> {
    let e = |e: crate::Error| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random(4, 8, &mut rng);
    let y = random(4, 6, &mut rng);
    for method in Method::ALL {
        let w = random(8, 6, &mut rng);
        let bias = random(1, 6, &mut rng).scale(0.1).into_vec();
        let layer = AdaptedLayer::new(w, bias).map_err(e)?;
        let mut model = Model::from_layers(vec![layer], Activation::Identity).map_err(e)?;
        let mut cfg = MethodConfig::<f64>::default();
        cfg.smagnorm.detach_gradient = false;
        model.attach(method, &cfg, 3).map_err(e)?;
        for round in 0..2 {
            for p in model.layers[0].trainable_params() {
                let theta = model.layers[0].param_mut(p).expect("trainable");
                let (r, c) = theta.shape();
                theta.axpy(0.3, &random(r, c, &mut rng)).map_err(e)?;
            }
            if round == 0 && method == Method::SecuraM2 {
                model.boundary_fusion().map_err(e)?;
            }
        }
        model.touch();
        let loss = |m: &Model<f64>| -> Result<f64, String> {
            let pred = m.predict(&x).map_err(e)?;
            Ok(Loss::Mse.value_and_grad(&pred, &y).map_err(e)?.0)
        };
        let (pred, cache) = model.forward(&x).map_err(e)?;
        let (_, g) = Loss::Mse.value_and_grad(&pred, &y).map_err(e)?;
        let grads = model.backward(&cache, &g).map_err(e)?;
        for (p, g) in &grads.layers[0] {
            let mut fd = Matrix::zeros(g.rows(), g.cols());
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    let mut probe = model.clone();
                    let v = probe.layers[0].param(*p).expect("trainable").get(i, j);
                    let h = 1e-5;
                    probe.layers[0].param_mut(*p).expect("trainable").set(i, j, v + h);
                    let up = loss(&probe)?;
                    probe.layers[0].param_mut(*p).expect("trainable").set(i, j, v - h);
                    let dn = loss(&probe)?;
                    fd.set(i, j, (up - dn) / (2.0 * h));
                }
            }
            let scale = g.frobenius_norm().max(fd.frobenius_norm()).max(1e-12);
            let rel = g.sub(&fd).map_err(e)?.frobenius_norm() / scale;
            ensure(rel < 1e-4, || format!("{method} {p:?}: relative error {rel:e}"))?;
        }
    }
    Ok(())
}

fn retention_arithmetic() -> Result<(), String> {
    let e = |e: crate::Error| e.to_string();
    let acc = retention_score("m", 0.8, &[0.8, 0.6, 0.4], true).map_err(e)?;
    ensure(acc.retention_ratio == Some(0.5), || {
        format!("accuracy ratio {:?}", acc.retention_ratio)
    })?;
    let mse = retention_score("m", 0.2, &[0.2, 0.4], false).map_err(e)?;
    ensure(mse.retention_ratio == Some(0.5), || {
        format!("mse ratio {:?}", mse.retention_ratio)
    })?;
    let undefined = retention_score("m", 0.0, &[0.3], true).map_err(e)?;
    ensure(undefined.retention_ratio.is_none(), || {
        "zero reference must be undefined".into()
    })
}

type Check = fn() -> Result<(), String>;

pub fn run() -> Vec<CheckOutcome> {
    let checks: [(&'static str, Check); 7] = [
        ("sigmoid band", sigmoid_band),
        ("restriction in (1, 2)", restriction_in_open_band),
        ("zero-delta identity", zero_delta_identity),
        ("svd reconstruction", svd_reconstructs),
        ("M2 conservation", m2_merge_conserves_weight),
        ("gradients vs finite differences", gradients_match_differences),
        ("retention arithmetic", retention_arithmetic),
    ];
    checks
        .into_iter()
        .map(|(name, f)| CheckOutcome { name, result: f() })
        .collect()
}
