//! Field arithmetic shared by every module: anisotropic total variation and
//! its subgradient, exact L0, clipping, Adam, and a central-difference
//! gradient oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field2D;

/// `sign` with `sign(0) = 0`, the subgradient convention used for every
/// absolute value in this crate.
#[inline]
pub fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Anisotropic forward-difference total variation, unnormalized.
pub fn total_variation(f: &Field2D) -> f64 {
    let (w, h) = (f.width(), f.height());
    let v = f.values();
    let mut tv = 0.0;
    for y in 0..h {
        let row = &v[y * w..(y + 1) * w];
        for x in 0..w {
            if x + 1 < w {
                tv += (row[x + 1] - row[x]).abs();
            }
            if y + 1 < h {
                tv += (v[(y + 1) * w + x] - row[x]).abs();
            }
        }
    }
    tv
}

/// Subgradient of [`total_variation`] with respect to each entry.
pub fn total_variation_subgradient(f: &Field2D) -> Field2D {
    let (w, h) = (f.width(), f.height());
    let v = f.values();
    let mut g = Field2D::zeros(w, h);
    let gv = g.values_mut();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                let s = sign0(v[i + 1] - v[i]);
                gv[i + 1] += s;
                gv[i] -= s;
            }
            if y + 1 < h {
                let s = sign0(v[i + w] - v[i]);
                gv[i + w] += s;
                gv[i] -= s;
            }
        }
    }
    g
}

/// Number of entries that are exactly nonzero.
pub fn l0(f: &Field2D) -> usize {
    f.values().iter().filter(|&&v| v != 0.0).count()
}

pub fn clip(f: &Field2D, lo: f64, hi: f64) -> Result<Field2D> {
    if lo > hi {
        return Err(Error::InvalidRange { lo, hi });
    }
    Ok(f.map(|v| v.max(lo).min(hi)))
}

pub fn clip_in_place(f: &mut Field2D, lo: f64, hi: f64) {
    debug_assert!(lo <= hi);
    for v in f.values_mut() {
        *v = v.max(lo).min(hi);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps_hat: 1e-8 }
    }
}

/// Adam moments for a flat parameter vector (an image or a model's weights).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("adam lr must be positive, got {}", config.lr)));
        }
        for (name, b) in [("beta1", config.beta1), ("beta2", config.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidConfig(format!("adam {name} must lie in (0,1), got {b}")));
            }
        }
        if !(config.eps_hat > 0.0) {
            return Err(Error::InvalidConfig("adam eps_hat must be positive".into()));
        }
        Ok(Self { step: 0, m: vec![0.0; len], v: vec![0.0; len], config })
    }

    pub fn for_field(field: &Field2D, config: AdamConfig) -> Result<Self> {
        Self::new(field.len(), config)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// Advances the moments with `grad` and returns the bias-corrected
    /// descent update to add to the optimized values.
    pub fn update(&mut self, grad: &[f64]) -> Result<Vec<f64>> {
        if grad.len() != self.m.len() {
            return Err(Error::InvalidConfig(format!(
                "adam gradient has {} entries, state tracks {}",
                grad.len(),
                self.m.len()
            )));
        }
        let AdamConfig { lr, beta1, beta2, eps_hat } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut out = Vec::with_capacity(grad.len());
        for ((m, v), &g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(grad) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            out.push(-lr * m_hat / (v_hat.sqrt() + eps_hat));
        }
        Ok(out)
    }

    /// One Adam step on `target`; returns `target + update`.
    pub fn adam_step(&mut self, grad: &Field2D, target: &Field2D) -> Result<Field2D> {
        grad.check_shape(target)?;
        if target.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected_width: self.m.len(),
                expected_height: 1,
                width: target.width(),
                height: target.height(),
            });
        }
        let update = self.update(grad.values())?;
        let values = target.values().iter().zip(&update).map(|(t, u)| t + u).collect();
        Field2D::new(target.width(), target.height(), values)
    }
}

/// Central-difference gradient of a scalar function of a field.
pub fn finite_diff_gradient(f: impl Fn(&Field2D) -> f64, at: &Field2D, h: f64) -> Field2D {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = at.clone();
    let mut grad = Field2D::zeros_like(at);
    for i in 0..at.len() {
        let x0 = at.values()[i];
        probe.values_mut()[i] = x0 + h;
        let plus = f(&probe);
        probe.values_mut()[i] = x0 - h;
        let minus = f(&probe);
        probe.values_mut()[i] = x0;
        grad.values_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Max-norm relative error `|a - b|_inf / max(|b|_inf, floor)`.
pub fn max_relative_error(analytic: &Field2D, numeric: &Field2D, floor: f64) -> f64 {
    assert!(analytic.same_shape(numeric));
    let diff = analytic
        .values()
        .iter()
        .zip(numeric.values())
        .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
    diff / numeric.max_abs().max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent TV oracle: enumerate every unordered pair of 4-neighbors.
    fn tv_pairs_oracle(f: &Field2D) -> f64 {
        let (w, h) = (f.width() as i64, f.height() as i64);
        let mut total = 0.0;
        for a in 0..w * h {
            for b in (a + 1)..w * h {
                let (ax, ay) = (a % w, a / w);
                let (bx, by) = (b % w, b / w);
                if (ax - bx).abs() + (ay - by).abs() == 1 {
                    total += (f.values()[a as usize] - f.values()[b as usize]).abs();
                }
            }
        }
        total
    }

    #[test]
    fn tv_examples() {
        assert_eq!(total_variation(&Field2D::filled(7, 3, 0.37)), 0.0);
        let mut spike = Field2D::zeros(5, 5);
        spike.set(2, 2, 1.0);
        assert_eq!(tv_pairs_oracle(&spike), 4.0);
        assert_eq!(total_variation(&spike), 4.0);
        let row = Field2D::new(4, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(tv_pairs_oracle(&row), 2.0);
        assert_eq!(total_variation(&row), 2.0);
    }

    #[test]
    fn l0_examples() {
        assert_eq!(l0(&Field2D::zeros(4, 4)), 0);
        let f = Field2D::new(3, 2, vec![0.0, 1e-300, 0.0, -2.0, 0.0, 5.0]).unwrap();
        assert_eq!(l0(&f), 3);
        let img = Field2D::from_fn(4, 4, |x, y| (x * y) as f64 / 16.0);
        assert_eq!(l0(&img.sub(&img).unwrap()), 0);
    }

    #[test]
    fn clip_examples() {
        let f = Field2D::new(3, 1, vec![-0.2, 0.5, 1.3]).unwrap();
        assert_eq!(clip(&f, 0.0, 1.0).unwrap().values(), &[0.0, 0.5, 1.0]);
        let inside = Field2D::new(2, 1, vec![0.1, 0.9]).unwrap();
        assert_eq!(clip(&inside, 0.0, 1.0).unwrap(), inside);
        let above = Field2D::filled(2, 2, 2.0);
        assert_eq!(clip(&above, 0.0, 1.0).unwrap(), Field2D::filled(2, 2, 1.0));
        assert!(matches!(clip(&f, 1.0, 0.0), Err(Error::InvalidRange { .. })));
    }

    #[test]
    fn adam_first_step_with_unit_gradient() {
        let cfg = AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps_hat: 1e-8 };
        let target = Field2D::zeros(3, 2);
        let mut st = AdamState::for_field(&target, cfg).unwrap();
        let out = st.adam_step(&Field2D::filled(3, 2, 1.0), &target).unwrap();
        // m_hat = v_hat = 1, so the update is -0.1 / (1 + 1e-8).
        for &u in out.values() {
            assert!((u - (-0.0999999990)).abs() < 1e-12, "{u}");
        }
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let target = Field2D::from_fn(4, 4, |x, y| (x + y) as f64 * 0.1);
        let mut st = AdamState::for_field(&target, AdamConfig::with_lr(0.3)).unwrap();
        let out = st.adam_step(&Field2D::zeros(4, 4), &target).unwrap();
        assert_eq!(out, target);
    }

    #[test]
    fn adam_two_steps_move_monotonically() {
        let target = Field2D::filled(2, 1, 1.0);
        let grad = Field2D::filled(2, 1, 0.5);
        let mut st = AdamState::for_field(&target, AdamConfig::with_lr(0.01)).unwrap();
        let a = st.adam_step(&grad, &target).unwrap();
        let b = st.adam_step(&grad, &a).unwrap();
        assert!(a.get(0, 0) < 1.0 && b.get(0, 0) < a.get(0, 0));
    }

    #[test]
    fn adam_rejects_mismatch() {
        let mut st = AdamState::new(4, AdamConfig::default()).unwrap();
        assert!(st.update(&[0.0; 3]).is_err());
        assert!(st.adam_step(&Field2D::zeros(2, 2), &Field2D::zeros(1, 4)).is_err());
        assert!(AdamState::new(1, AdamConfig::with_lr(0.0)).is_err());
    }

    #[test]
    fn finite_diff_examples() {
        let at = Field2D::new(2, 1, vec![1.0, 2.0]).unwrap();
        let g = finite_diff_gradient(|f| f.values().iter().map(|v| v * v).sum(), &at, 1e-5);
        assert!((g.get(0, 0) - 2.0).abs() < 1e-8);
        assert!((g.get(1, 0) - 4.0).abs() < 1e-8);
        let c = finite_diff_gradient(|_| 3.5, &at, 1e-5);
        assert_eq!(c.max_abs(), 0.0);
    }

    #[test]
    fn tv_subgradient_matches_finite_differences_away_from_ties() {
        // Strictly increasing along both axes with distinct steps: no ties.
        let f = Field2D::from_fn(5, 4, |x, y| 0.13 * x as f64 + 0.71 * y as f64 + 0.01 * (x * y) as f64);
        let analytic = total_variation_subgradient(&f);
        let numeric = finite_diff_gradient(total_variation, &f, 1e-5);
        assert!(max_relative_error(&analytic, &numeric, 1e-12) < 1e-6);
    }

    fn field_strategy() -> impl Strategy<Value = Field2D> {
        (1usize..7, 1usize..7).prop_flat_map(|(w, h)| {
            proptest::collection::vec(-2.0f64..2.0, w * h)
                .prop_map(move |v| Field2D::new(w, h, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn tv_matches_pair_oracle(f in field_strategy()) {
            prop_assert!((total_variation(&f) - tv_pairs_oracle(&f)).abs() < 1e-9);
        }

        #[test]
        fn tv_shift_invariant(f in field_strategy(), k in -3.0f64..3.0) {
            // Shifting by a dyadic constant keeps differences exact.
            let k = (k * 8.0).round() / 8.0;
            let shifted = f.map(|v| v + k);
            prop_assert!((total_variation(&f) - total_variation(&shifted)).abs() < 1e-9);
        }

        #[test]
        fn tv_zero_iff_constant(f in field_strategy()) {
            let constant = f.values().iter().all(|&v| v == f.values()[0]);
            prop_assert_eq!(total_variation(&f) == 0.0, constant);
        }

        #[test]
        fn l0_sign_and_scale_invariant(f in field_strategy(), k in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0]) {
            prop_assert_eq!(l0(&f), l0(&f.scale(-1.0)));
            prop_assert_eq!(l0(&f), l0(&f.scale(k)));
        }

        #[test]
        fn clip_idempotent(f in field_strategy()) {
            let once = clip(&f, -0.5, 0.75).unwrap();
            prop_assert_eq!(clip(&once, -0.5, 0.75).unwrap(), once);
        }
    }
}
