//! Smooth and hard binarization of a perturbation's support, and the
//! zero-threshold mask derived from the smooth field.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field2D;
use crate::numerics::sign0;

/// Exponent clamp for the sigmoid; keeps every finite input finite.
const EXP_CLAMP: f64 = 500.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinarizeParams {
    /// Sigmoid sharpness.
    pub gamma: f64,
    /// Dead zone: perturbations smaller than this map to negative values.
    pub epsilon: f64,
}

impl Default for BinarizeParams {
    fn default() -> Self {
        Self { gamma: 30.0, epsilon: 0.01 }
    }
}

impl BinarizeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidConfig(format!("epsilon must lie in (0,1), got {}", self.epsilon)));
        }
        Ok(())
    }

    /// S as a function of the absolute perturbation `d`.
    #[inline]
    pub fn s_of(&self, d: f64) -> f64 {
        let z = (self.gamma * (d - self.epsilon)).clamp(-EXP_CLAMP, EXP_CLAMP);
        2.0 / (1.0 + (-z).exp()) - 1.0
    }
}

/// Real-valued smooth binarization of `|I - I_hat|`, entries in (-1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct SField(Field2D);

impl SField {
    pub fn field(&self) -> &Field2D {
        &self.0
    }

    pub fn into_field(self) -> Field2D {
        self.0
    }
}

/// Elementwise indicator of a nonzero entry.
pub fn hard_binarize(f: &Field2D) -> Field2D {
    f.map(|v| if v != 0.0 { 1.0 } else { 0.0 })
}

pub fn smooth_binarize(image: &Field2D, perturbed: &Field2D, p: &BinarizeParams) -> Result<SField> {
    let s = image.zip_map(perturbed, |a, b| p.s_of((a - b).abs()))?;
    Ok(SField(s))
}

/// Derivative of S with respect to the perturbed image, `sign(0) := 0`.
pub fn smooth_binarize_grad(image: &Field2D, perturbed: &Field2D, p: &BinarizeParams) -> Result<Field2D> {
    image.zip_map(perturbed, |a, b| {
        let s = p.s_of((a - b).abs());
        p.gamma * sign0(b - a) * (1.0 - s) * (1.0 + s) / 2.0
    })
}

/// Saliency mask: 1 where S >= 0.
pub fn mask_from_s(s: &SField) -> Field2D {
    s.0.map(|v| if v >= 0.0 { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_gradient, max_relative_error};
    use proptest::prelude::*;

    fn one(v: f64) -> Field2D {
        Field2D::filled(1, 1, v)
    }

    #[test]
    fn hard_binarize_examples() {
        let f = Field2D::new(3, 1, vec![0.0, 0.5, -0.3]).unwrap();
        let b = hard_binarize(&f);
        assert_eq!(b.values(), &[0.0, 1.0, 1.0]);
        assert_eq!(hard_binarize(&Field2D::zeros(3, 3)), Field2D::zeros(3, 3));
        assert_eq!(hard_binarize(&b), b);
    }

    #[test]
    fn smooth_binarize_reference_values() {
        let p = BinarizeParams::default();
        // |d| = epsilon exactly: the exponent vanishes.
        assert_eq!(p.s_of(0.01), 0.0);
        // 2/(1+e^{0.3}) - 1, evaluated independently as -tanh(0.15).
        let at_zero = smooth_binarize(&one(0.4), &one(0.4), &p).unwrap();
        assert!((at_zero.field().get(0, 0) - (-0.15f64).tanh()).abs() < 1e-15);
        assert!((at_zero.field().get(0, 0) - (-0.1488852)).abs() < 1e-6);
        let full = smooth_binarize(&one(0.0), &one(1.0), &p).unwrap();
        assert!((full.field().get(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exponent_clamp_keeps_values_finite() {
        let p = BinarizeParams { gamma: 1e6, epsilon: 0.01 };
        let s = smooth_binarize(&one(0.0), &one(1e3), &p).unwrap();
        assert!(s.field().all_finite());
        let g = smooth_binarize_grad(&one(0.0), &one(-1e3), &p).unwrap();
        assert!(g.all_finite());
    }

    #[test]
    fn grad_matches_finite_differences() {
        let p = BinarizeParams::default();
        let image = Field2D::from_fn(4, 3, |x, y| 0.3 + 0.05 * x as f64 + 0.02 * y as f64);
        let perturbed = Field2D::from_fn(4, 3, |x, y| {
            let d = [0.004, -0.02, 0.11, -0.3, 0.009, 0.015][(x + 2 * y) % 6];
            0.3 + 0.05 * x as f64 + 0.02 * y as f64 + d
        });
        let analytic = smooth_binarize_grad(&image, &perturbed, &p).unwrap();
        let numeric = finite_diff_gradient(
            |q| smooth_binarize(&image, q, &p).unwrap().field().sum(),
            &perturbed,
            1e-6,
        );
        assert!(max_relative_error(&analytic, &numeric, 1e-12) < 1e-5);
        for (g, (a, b)) in analytic.values().iter().zip(image.values().iter().zip(perturbed.values())) {
            assert_eq!(g.signum(), (b - a).signum());
        }
    }

    #[test]
    fn grad_vanishes_without_perturbation() {
        let image = Field2D::from_fn(3, 3, |x, y| (x + y) as f64 / 6.0);
        let g = smooth_binarize_grad(&image, &image, &BinarizeParams::default()).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn mask_from_s_examples() {
        let p = BinarizeParams::default();
        let s = smooth_binarize(&one(0.2), &one(0.21), &p).unwrap();
        let zero = SField(one(0.0));
        assert_eq!(mask_from_s(&zero).get(0, 0), 1.0);
        let neg = SField(Field2D::filled(3, 3, -0.2));
        assert_eq!(mask_from_s(&neg), Field2D::zeros(3, 3));
        // 0.21 - 0.2 rounds to just under epsilon in binary floating point.
        assert_eq!(mask_from_s(&s).get(0, 0), if (0.21f64 - 0.2).abs() >= 0.01 { 1.0 } else { 0.0 });
    }

    #[test]
    fn mask_threshold_is_epsilon() {
        let p = BinarizeParams::default();
        let image = Field2D::filled(200, 1, 0.5);
        let perturbed = Field2D::from_fn(200, 1, |x, _| 0.5 + (x as f64 - 100.0) * 2e-4);
        let mask = mask_from_s(&smooth_binarize(&image, &perturbed, &p).unwrap());
        for x in 0..200 {
            let d = (image.get(x, 0) - perturbed.get(x, 0)).abs();
            assert_eq!(mask.get(x, 0) == 1.0, d >= p.epsilon, "x={x} d={d}");
        }
    }

    proptest! {
        #[test]
        fn even_and_bounded(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let p = BinarizeParams::default();
            let s1 = smooth_binarize(&one(a), &one(b), &p).unwrap().field().get(0, 0);
            let s2 = smooth_binarize(&one(b), &one(a), &p).unwrap().field().get(0, 0);
            prop_assert_eq!(s1, s2);
            prop_assert!(s1 > -1.0 && s1 <= 1.0);
        }

        #[test]
        fn increasing_in_abs_diff(d1 in 0.0f64..0.3, gap in 1e-6f64..0.3) {
            let p = BinarizeParams::default();
            prop_assert!(p.s_of(d1) < p.s_of(d1 + gap));
        }

        #[test]
        fn unperturbed_mask_is_empty(v in proptest::collection::vec(0.0f64..1.0, 16)) {
            let image = Field2D::new(4, 4, v).unwrap();
            let s = smooth_binarize(&image, &image, &BinarizeParams::default()).unwrap();
            prop_assert_eq!(mask_from_s(&s), Field2D::zeros(4, 4));
        }
    }
}
