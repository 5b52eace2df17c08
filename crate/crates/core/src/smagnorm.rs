//! Sigmoid magnitude normalization.
//!
//! Given a base weight `W` and an adapter delta `Δ`:
//!
//! ```text
//! merged  = W + Δ
//! mag     = | merged / (W + ε) |
//! normed  = (mag / (max(mag) + ε) − 0.5) · scale
//! restr   = 2 − σ(normed)            ∈ (1, 2)
//! updated = merged / restr
//! ```
//!
//! Entries whose magnitude moved most relative to the base see a divisor near
//! one; entries that barely moved are divided by nearly two.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SMagNormConfig<T> {
    pub epsilon: T,
    pub scale: T,
    /// Treat the restriction matrix as a constant during backpropagation.
    pub detach_gradient: bool,
}

impl<T: Scalar> SMagNormConfig<T> {
    pub fn new(epsilon: T, scale: T, detach_gradient: bool) -> Result<Self> {
        let cfg = Self {
            epsilon,
            scale,
            detach_gradient,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > T::zero() && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "smagnorm epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.scale > T::zero() && self.scale.is_finite()) {
            return Err(Error::Config(format!(
                "smagnorm scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> Default for SMagNormConfig<T> {
    fn default() -> Self {
        Self {
            epsilon: T::lit(1e-8),
            scale: T::lit(12.0),
            detach_gradient: true,
        }
    }
}

/// Every intermediate of one normalization pass, all shaped like the base.
#[derive(Debug, Clone, PartialEq)]
pub struct SMagNormTrace<T> {
    pub merged: Matrix<T>,
    pub mag: Matrix<T>,
    pub normed: Matrix<T>,
    pub restriction: Matrix<T>,
    pub updated: Matrix<T>,
}

/// Min, max and mean of a restriction matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RestrictionStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl<T: Scalar> SMagNormTrace<T> {
    pub fn restriction_stats(&self) -> RestrictionStats {
        RestrictionStats {
            min: self.restriction.min().to_f64_lossy(),
            max: self.restriction.max().to_f64_lossy(),
            mean: self.restriction.mean().to_f64_lossy(),
        }
    }
}

pub fn merged_weight<T: Scalar>(w_base: &Matrix<T>, delta: &Matrix<T>) -> Result<Matrix<T>> {
    w_base.add(delta)
}

pub fn magnitude_ratio<T: Scalar>(merged: &Matrix<T>, w_base: &Matrix<T>, epsilon: T) -> Result<Matrix<T>> {
    Ok(merged.div_elem_offset(w_base, epsilon)?.abs())
}

pub fn normalize_ratio<T: Scalar>(mag: &Matrix<T>, epsilon: T, scale: T) -> Matrix<T> {
    let denom = mag.max() + epsilon;
    let half = T::lit(0.5);
    mag.map(|v| (v / denom - half) * scale)
}

pub fn restriction_matrix<T: Scalar>(normed: &Matrix<T>) -> Matrix<T> {
    let two = T::lit(2.0);
    normed.map(|x| two - x.sigmoid())
}

pub fn apply_smagnorm<T: Scalar>(
    w_base: &Matrix<T>,
    delta: &Matrix<T>,
    config: &SMagNormConfig<T>,
) -> Result<SMagNormTrace<T>> {
    config.validate()?;
    let merged = merged_weight(w_base, delta)?;
    let mag = magnitude_ratio(&merged, w_base, config.epsilon)?;
    let normed = normalize_ratio(&mag, config.epsilon, config.scale);
    let restriction = restriction_matrix(&normed);
    let updated = merged.zip_map(&restriction, "smagnorm divide", |a, b| a / b)?;
    Ok(SMagNormTrace {
        merged,
        mag,
        normed,
        restriction,
        updated,
    })
}

/// Pulls `∂L/∂updated` back to `∂L/∂merged`.
///
/// With `detach_gradient` the restriction is a constant and the result is
/// `grad ⊘ restr`. Otherwise the path through `mag` and `max(mag)` is
/// included, routing the max term to the first maximal entry.
pub fn backprop<T: Scalar>(
    trace: &SMagNormTrace<T>,
    w_base: &Matrix<T>,
    grad_updated: &Matrix<T>,
    config: &SMagNormConfig<T>,
) -> Result<Matrix<T>> {
    let direct = grad_updated.zip_map(&trace.restriction, "smagnorm backprop", |g, r| g / r)?;
    if config.detach_gradient {
        return Ok(direct);
    }
    let (rows, cols) = trace.merged.shape();
    let eps = config.epsilon;
    let m = trace.mag.max();
    let denom = m + eps;
    let flat = trace.mag.as_slice().iter().position(|&v| v == m).unwrap_or(0);
    let (ai, aj) = (flat / cols, flat % cols);

    // ∂L/∂normed, then ∂L/∂mag through the direct path and through max(mag).
    let mut grad_mag = Matrix::zeros(rows, cols);
    let mut grad_max = T::zero();
    for i in 0..rows {
        for j in 0..cols {
            let r = trace.restriction.get(i, j);
            let g_res = -grad_updated.get(i, j) * trace.merged.get(i, j) / (r * r);
            let s = trace.normed.get(i, j).sigmoid();
            let g_norm = -g_res * s * (T::one() - s);
            grad_mag.set(i, j, g_norm * config.scale / denom);
            grad_max -= g_norm * config.scale * trace.mag.get(i, j) / (denom * denom);
        }
    }
    let bumped = grad_mag.get(ai, aj) + grad_max;
    grad_mag.set(ai, aj, bumped);

    let mut out = direct;
    for i in 0..rows {
        for j in 0..cols {
            let q = trace.merged.get(i, j) / (w_base.get(i, j) + eps);
            let dmag = q.signum() / (w_base.get(i, j) + eps);
            let v = out.get(i, j) + grad_mag.get(i, j) * dmag;
            out.set(i, j, v);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn merged_weight_examples() {
        let w = random(3, 4, 1);
        assert_eq!(merged_weight(&w, &Matrix::zeros(3, 4)).unwrap(), w);
        let m = merged_weight(&Matrix::<f64>::from_rows(&[[2.0]]), &Matrix::from_rows(&[[2.0]])).unwrap();
        assert_eq!(m.get(0, 0), 4.0);
        let d = random(3, 4, 2);
        let s = merged_weight(&w, &d).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(s.get(i, j), w.get(i, j) + d.get(i, j));
            }
        }
        assert!(merged_weight(&w, &Matrix::zeros(4, 3)).is_err());
    }

    #[test]
    fn magnitude_ratio_examples() {
        let base = Matrix::<f64>::from_fn(2, 3, |_, _| 2.0);
        let r = magnitude_ratio(&base, &base, 1e-8).unwrap();
        assert!(r.as_slice().iter().all(|v| (v - 1.0).abs() < 1e-8));
        let r = magnitude_ratio(&Matrix::from_rows(&[[4.0]]), &Matrix::<f64>::from_rows(&[[2.0]]), 1e-8).unwrap();
        assert!((r.get(0, 0) - 2.0).abs() < 1e-8);
        let r = magnitude_ratio(
            &Matrix::<f64>::from_rows(&[[2.0, 0.0]]),
            &Matrix::from_rows(&[[1.0, -2.0]]),
            1e-8,
        )
        .unwrap();
        assert!(r.get(0, 0) == 2.0 / (1.0 + 1e-8));
        assert!(r.get(0, 1).abs() < 1e-8);
    }

    #[test]
    fn normalize_ratio_examples() {
        let n = normalize_ratio(&Matrix::<f64>::from_rows(&[[2.0, 0.0]]), 1e-12, 12.0);
        assert!((n.get(0, 0) - 6.0).abs() < 1e-6);
        assert!((n.get(0, 1) + 6.0).abs() < 1e-6);
        let n = normalize_ratio(&Matrix::<f64>::from_rows(&[[1.0, 1.0]]), 1e-12, 12.0);
        assert!(n.as_slice().iter().all(|v| (v - 6.0).abs() < 1e-6));
        let z = normalize_ratio(&Matrix::<f64>::zeros(2, 2), 1e-8, 12.0);
        assert!(z.as_slice().iter().all(|&v| v == -6.0));

        let mag = random(5, 5, 3).abs();
        let n = normalize_ratio(&mag, 1e-8, 12.0);
        let max = mag.as_slice().iter().cloned().fold(0.0, f64::max);
        for (v, m) in n.as_slice().iter().zip(mag.as_slice()) {
            assert!((v - (m / (max + 1e-8) - 0.5) * 12.0).abs() < 1e-12);
            assert!(*v >= -6.0 && *v < 6.0);
        }
        assert!((n.max() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn restriction_examples() {
        let r = restriction_matrix(&Matrix::<f64>::from_rows(&[[0.0, 0.5, -0.5, 6.0, -6.0]]));
        assert_eq!(r.get(0, 0), 1.5);
        assert!((r.get(0, 1) - 1.3775).abs() < 5e-5);
        assert!((r.get(0, 2) - 1.6225).abs() < 5e-5);
        assert!((r.get(0, 3) - (2.0 - sig(6.0))).abs() < 1e-15);
        assert!((r.get(0, 3) - 1.00247).abs() < 5e-6);
        assert!((r.get(0, 4) - 1.99753).abs() < 5e-6);
    }

    #[test]
    fn constant_base_with_zero_delta() {
        let base = Matrix::<f64>::from_fn(3, 3, |_, _| 0.7);
        let t = apply_smagnorm(&base, &Matrix::zeros(3, 3), &SMagNormConfig::default()).unwrap();
        let ratio = 0.7 / (0.7 + 1e-8);
        let normed = (ratio / (ratio + 1e-8) - 0.5) * 12.0;
        let want = 0.7 / (2.0 - sig(normed));
        for v in t.updated.as_slice() {
            assert!((v - want).abs() < 1e-15);
            assert!((v - 0.7 / 1.00247).abs() < 1e-5);
        }
    }

    #[test]
    fn single_entry_composition() {
        let cfg = SMagNormConfig::default();
        let t = apply_smagnorm(&Matrix::<f64>::from_rows(&[[2.0]]), &Matrix::from_rows(&[[2.0]]), &cfg).unwrap();
        let mag = (4.0f64 / (2.0 + 1e-8)).abs();
        let normed = (mag / (mag + 1e-8) - 0.5) * 12.0;
        assert!((t.normed.get(0, 0) - 6.0).abs() < 1e-7);
        assert!((t.updated.get(0, 0) - 4.0 / (2.0 - sig(normed))).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(SMagNormConfig::new(0.0, 12.0, true).is_err());
        assert!(SMagNormConfig::new(1e-8, -1.0, true).is_err());
        assert!(SMagNormConfig::new(1e-8, 12.0, false).is_ok());
    }

    #[test]
    fn attached_backprop_matches_finite_differences() {
        let base = random(4, 3, 5);
        let delta = random(4, 3, 6).scale(0.3);
        let probe = random(4, 3, 7);
        let cfg = SMagNormConfig::new(1e-8, 12.0, false).unwrap();
        let loss = |d: &Matrix<f64>| -> f64 {
            let t = apply_smagnorm(&base, d, &cfg).unwrap();
            t.updated.hadamard(&probe).unwrap().sum()
        };
        let trace = apply_smagnorm(&base, &delta, &cfg).unwrap();
        let grad = backprop(&trace, &base, &probe, &cfg).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..3 {
                let mut p = delta.clone();
                p.set(i, j, delta.get(i, j) + h);
                let mut m = delta.clone();
                m.set(i, j, delta.get(i, j) - h);
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert!(
                    (fd - grad.get(i, j)).abs() <= 1e-5 * fd.abs().max(1.0),
                    "{i},{j}: {fd} vs {}",
                    grad.get(i, j)
                );
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn restriction_stays_in_open_interval(seed in any::<u64>(), spread in 0.0f64..50.0) {
                let base = random(5, 4, seed);
                let delta = random(5, 4, seed ^ 0x5eed).scale(spread);
                let t = apply_smagnorm(&base, &delta, &SMagNormConfig::default()).unwrap();
                for &r in t.restriction.as_slice() {
                    prop_assert!(r > 1.0 && r < 2.0);
                }
                for &n in t.normed.as_slice() {
                    prop_assert!((-6.0..=6.0).contains(&n));
                }
                let mf = t.merged.frobenius_norm();
                if mf > 0.0 {
                    prop_assert!(t.updated.frobenius_norm() < mf);
                }
                for (u, m) in t.updated.as_slice().iter().zip(t.merged.as_slice()) {
                    if *m != 0.0 {
                        prop_assert!(u.abs() < m.abs() && u.abs() > m.abs() / 2.0);
                    }
                }
            }

            #[test]
            fn larger_ratio_means_smaller_divisor(seed in any::<u64>()) {
                let base = random(4, 4, seed);
                let delta = random(4, 4, seed.wrapping_add(1));
                let t = apply_smagnorm(&base, &delta, &SMagNormConfig::default()).unwrap();
                let mags = t.mag.as_slice();
                let res = t.restriction.as_slice();
                for a in 0..mags.len() {
                    for b in 0..mags.len() {
                        if mags[a] > mags[b] {
                            prop_assert!(res[a] <= res[b]);
                        }
                    }
                }
            }

            #[test]
            fn pure_function(seed in any::<u64>()) {
                let base = random(3, 5, seed);
                let delta = random(3, 5, !seed);
                let cfg = SMagNormConfig::default();
                prop_assert_eq!(apply_smagnorm(&base, &delta, &cfg).unwrap(), apply_smagnorm(&base, &delta, &cfg).unwrap());
            }
        }
    }
}
