//! Two-phase explanation by regularized adversarial perturbation.
//!
//! Phase 1 descends the smooth surrogate
//! `E = M(Î)_c + α/N · ΣS + β/N · TV(S)` from `Î = I`, clipping to [0,1]
//! after every Adam step. The saliency mask is `S >= 0` at the end of phase 1.
//! Phase 2 restarts from `Ǐ = I` and minimizes `M(Ǐ)_c` alone with every
//! gradient and update multiplied by the mask, so `Ǐ` equals `I` bit-exactly
//! outside it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field2D;
use crate::metrics::{ape_d, ApeBreakdown, ApeWeights};
use crate::model::{Classifier, POSITIVE_CLASS};
use crate::numerics::{clip_in_place, total_variation, total_variation_subgradient, AdamConfig, AdamState};
use crate::regularizers::{mask_from_s, smooth_binarize, smooth_binarize_grad, BinarizeParams, SField};

/// Consecutive small loss changes required to declare convergence.
pub const CONVERGENCE_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Weight of ΣS, applied as `alpha / N`.
    pub alpha: f64,
    /// Weight of TV(S), applied as `beta / N`.
    pub beta: f64,
    pub binarize: BinarizeParams,
    pub lr: f64,
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    pub convergence_tol: f64,
    /// Recorded for provenance; the engine itself draws no random numbers.
    pub seed: u64,
    pub class_index: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            alpha: 40.0,
            beta: 120.0,
            binarize: BinarizeParams::default(),
            lr: 0.01,
            phase1_iters: 500,
            phase2_iters: 200,
            convergence_tol: 1e-7,
            seed: 42,
            class_index: POSITIVE_CLASS,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.binarize.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return bad(format!("alpha/beta must be non-negative, got {}/{}", self.alpha, self.beta));
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.phase1_iters == 0 || self.phase2_iters == 0 {
            return bad("iteration counts must be at least 1".into());
        }
        if !(self.convergence_tol >= 0.0) {
            return bad("convergence_tol must be non-negative".into());
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub mask: Field2D,
    pub perturbed_phase1: Field2D,
    pub perturbed_phase2: Field2D,
    /// APE_D of the phase-2 image with unit weights.
    pub breakdown: ApeBreakdown,
    pub phase1_loss_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase1Output {
    pub perturbed: Field2D,
    pub s: SField,
    /// Loss at the start of every iteration, plus the loss at the returned point.
    pub loss_trace: Vec<f64>,
}

/// Phase-1 loss and its gradient with respect to `perturbed`.
pub fn phase1_objective(
    model: &impl Classifier,
    image: &Field2D,
    perturbed: &Field2D,
    cfg: &EngineConfig,
) -> Result<(f64, Field2D)> {
    let n = image.len() as f64;
    let (pred, model_grad) = model.input_gradient(perturbed, cfg.class_index)?;
    let s = smooth_binarize(image, perturbed, &cfg.binarize)?;
    let ds = smooth_binarize_grad(image, perturbed, &cfg.binarize)?;
    let s = s.field();
    let loss = pred.prob(cfg.class_index) + cfg.alpha / n * s.sum() + cfg.beta / n * total_variation(s);

    let tv_sub = total_variation_subgradient(s);
    let (a, b) = (cfg.alpha / n, cfg.beta / n);
    let values = model_grad
        .values()
        .iter()
        .zip(ds.values())
        .zip(tv_sub.values())
        .map(|((&g, &d), &t)| g + (a + b * t) * d)
        .collect();
    Ok((loss, Field2D::new(image.width(), image.height(), values)?))
}

/// Phase-1 loss alone, for tracing and finite-difference checks.
pub fn phase1_loss(model: &impl Classifier, image: &Field2D, perturbed: &Field2D, cfg: &EngineConfig) -> Result<f64> {
    let n = image.len() as f64;
    let s = smooth_binarize(image, perturbed, &cfg.binarize)?;
    let p = model.forward(perturbed)?.prob(cfg.class_index);
    Ok(p + cfg.alpha / n * s.field().sum() + cfg.beta / n * total_variation(s.field()))
}

fn check_image(model: &impl Classifier, image: &Field2D) -> Result<()> {
    model.check_input(image)?;
    if !image.in_range(0.0, 1.0) {
        return Err(Error::OutOfRange("input image must lie in [0,1]".into()));
    }
    Ok(())
}

struct Convergence {
    tol: f64,
    streak: usize,
    last: Option<f64>,
}

impl Convergence {
    fn new(tol: f64) -> Self {
        Self { tol, streak: 0, last: None }
    }

    /// Records a loss; true once the change stayed below `tol` for
    /// [`CONVERGENCE_WINDOW`] consecutive iterations.
    fn observe(&mut self, loss: f64) -> bool {
        if let Some(prev) = self.last {
            if (loss - prev).abs() < self.tol {
                self.streak += 1;
            } else {
                self.streak = 0;
            }
        }
        self.last = Some(loss);
        self.streak >= CONVERGENCE_WINDOW
    }
}

pub fn phase1(model: &impl Classifier, image: &Field2D, cfg: &EngineConfig) -> Result<Phase1Output> {
    cfg.validate()?;
    check_image(model, image)?;
    let mut perturbed = image.clone();
    let mut adam = AdamState::for_field(image, cfg.adam())?;
    let mut conv = Convergence::new(cfg.convergence_tol);
    let mut trace = Vec::with_capacity(cfg.phase1_iters + 1);
    for it in 0..cfg.phase1_iters {
        let (loss, grad) = phase1_objective(model, image, &perturbed, cfg)?;
        if !loss.is_finite() || !grad.all_finite() {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        trace.push(loss);
        if conv.observe(loss) {
            break;
        }
        perturbed = adam.adam_step(&grad, &perturbed)?;
        clip_in_place(&mut perturbed, 0.0, 1.0);
    }
    let final_loss = phase1_loss(model, image, &perturbed, cfg)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFiniteLoss { iteration: trace.len() });
    }
    trace.push(final_loss);
    let s = smooth_binarize(image, &perturbed, &cfg.binarize)?;
    Ok(Phase1Output { perturbed, s, loss_trace: trace })
}

pub fn derive_mask(s: &SField) -> Field2D {
    mask_from_s(s)
}

/// Mask-confined descent on the class probability from `Ǐ = I`.
pub fn phase2(model: &impl Classifier, image: &Field2D, mask: &Field2D, cfg: &EngineConfig) -> Result<Field2D> {
    cfg.validate()?;
    check_image(model, image)?;
    image.check_shape(mask)?;
    mask.check_binary()?;
    let mut current = image.clone();
    if mask.max() == 0.0 {
        return Ok(current);
    }
    let mut adam = AdamState::for_field(image, cfg.adam())?;
    let mut conv = Convergence::new(cfg.convergence_tol);
    let m = mask.values();
    for it in 0..cfg.phase2_iters {
        let (pred, grad) = model.input_gradient(&current, cfg.class_index)?;
        let loss = pred.prob(cfg.class_index);
        if !loss.is_finite() || !grad.all_finite() {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        if conv.observe(loss) {
            break;
        }
        let masked: Vec<f64> = grad.values().iter().zip(m).map(|(g, k)| g * k).collect();
        let update = adam.update(&masked)?;
        for ((v, u), k) in current.values_mut().iter_mut().zip(update).zip(m) {
            *v += u * k;
        }
        clip_in_place(&mut current, 0.0, 1.0);
    }
    Ok(current)
}

/// Phase 1, mask derivation, phase 2, and the APE_D score of the result.
pub fn explain(model: &impl Classifier, image: &Field2D, cfg: &EngineConfig) -> Result<Explanation> {
    let p1 = phase1(model, image, cfg)?;
    let mask = derive_mask(&p1.s);
    let perturbed_phase2 = phase2(model, image, &mask, cfg)?;
    let breakdown = ape_d(model, image, &perturbed_phase2, cfg.class_index, &ApeWeights::default())?;
    Ok(Explanation {
        mask,
        perturbed_phase1: p1.perturbed,
        perturbed_phase2,
        breakdown,
        phase1_loss_trace: p1.loss_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClassifierParams, Prediction};
    use crate::numerics::{finite_diff_gradient, l0, max_relative_error};

    /// Logistic model on the mean intensity; `bias` sets the operating point.
    struct MeanLogit {
        side: usize,
        bias: f64,
    }

    impl Classifier for MeanLogit {
        fn input_dims(&self) -> (usize, usize) {
            (self.side, self.side)
        }
        fn forward(&self, image: &Field2D) -> Result<Prediction> {
            let z = 8.0 * image.sum() / image.len() as f64 + self.bias;
            let p1 = 1.0 / (1.0 + (-z).exp());
            Ok(Prediction { probs: [1.0 - p1, p1] })
        }
        fn input_gradient(&self, image: &Field2D, class: usize) -> Result<(Prediction, Field2D)> {
            let pred = self.forward(image)?;
            let g = 8.0 / image.len() as f64 * pred.probs[0] * pred.probs[1];
            let g = if class == 1 { g } else { -g };
            Ok((pred, Field2D::filled(self.side, self.side, g)))
        }
    }

    fn constant_head(side: usize, logit: f64) -> ClassifierParams {
        let mut p = ClassifierParams::zeros(side).unwrap();
        p.dense_bias_mut()[1] = logit;
        p
    }

    fn test_image(side: usize) -> Field2D {
        Field2D::from_fn(side, side, |x, y| 0.2 + 0.6 * (((x * 5 + y * 3) % 11) as f64 / 10.0))
    }

    #[test]
    fn zero_gradient_keeps_input() {
        // Saturated head: p1 rounds to 0 and the input gradient is exactly 0.
        let model = constant_head(8, -800.0);
        let cfg = EngineConfig { alpha: 0.0, beta: 0.0, phase1_iters: 20, ..EngineConfig::default() };
        let image = test_image(8);
        let out = phase1(&model, &image, &cfg).unwrap();
        assert_eq!(out.perturbed, image);
    }

    #[test]
    fn initial_sum_of_s_is_negative() {
        let cfg = EngineConfig::default();
        let image = test_image(16);
        let s = smooth_binarize(&image, &image, &cfg.binarize).unwrap();
        let per_pixel = 2.0 / (1.0 + (30.0f64 * 0.01).exp()) - 1.0;
        assert!((s.field().sum() - 256.0 * per_pixel).abs() < 1e-12);
        assert!((per_pixel - (-0.1488852)).abs() < 1e-6);
        let model = constant_head(16, 2.0);
        let p = model.forward(&image).unwrap().probs[1];
        let e0 = phase1_loss(&model, &image, &image, &cfg).unwrap();
        assert!((e0 - (p + 40.0 / 256.0 * s.field().sum())).abs() < 1e-12);
    }

    #[test]
    fn phase1_gradient_matches_finite_differences() {
        let model = ClassifierParams::random(8, 4).unwrap();
        let image = test_image(8);
        let perturbed = Field2D::from_fn(8, 8, |x, y| {
            let d = 0.003 + 0.011 * (((x * 7 + y * 5) % 9) as f64 - 4.0) / 4.0 + 0.0007 * x as f64;
            (image.get(x, y) + d).clamp(0.05, 0.95)
        });
        let cfg = EngineConfig { alpha: 6.0, beta: 12.0, ..EngineConfig::default() };
        let (_, analytic) = phase1_objective(&model, &image, &perturbed, &cfg).unwrap();
        let numeric = finite_diff_gradient(|q| phase1_loss(&model, &image, q, &cfg).unwrap(), &perturbed, 1e-5);
        let err = max_relative_error(&analytic, &numeric, 1e-12);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn phase1_decreases_loss_and_stays_clipped() {
        let model = MeanLogit { side: 8, bias: -4.0 };
        let image = test_image(8);
        let cfg = EngineConfig { alpha: 0.1, beta: 0.1, phase1_iters: 60, lr: 0.02, ..EngineConfig::default() };
        let out = phase1(&model, &image, &cfg).unwrap();
        assert!(out.perturbed.in_range(0.0, 1.0));
        assert!(out.loss_trace.last().unwrap() <= &out.loss_trace[0]);
    }

    #[test]
    fn derive_mask_cases() {
        let neg = crate::regularizers::smooth_binarize(&test_image(4), &test_image(4), &BinarizeParams::default())
            .unwrap();
        assert_eq!(derive_mask(&neg), Field2D::zeros(4, 4));
        let image = Field2D::zeros(4, 1);
        let pert = Field2D::new(4, 1, vec![0.5, 0.0, 0.02, 0.005]).unwrap();
        let s = smooth_binarize(&image, &pert, &BinarizeParams::default()).unwrap();
        assert_eq!(derive_mask(&s).values(), &[1.0, 0.0, 1.0, 0.0]);
        let full = smooth_binarize(&image, &Field2D::filled(4, 1, 0.5), &BinarizeParams::default()).unwrap();
        assert_eq!(derive_mask(&full), Field2D::filled(4, 1, 1.0));
    }

    #[test]
    fn phase2_empty_mask_is_identity() {
        let model = MeanLogit { side: 8, bias: 0.0 };
        let image = test_image(8);
        let out = phase2(&model, &image, &Field2D::zeros(8, 8), &EngineConfig::default()).unwrap();
        assert_eq!(out, image);
    }

    #[test]
    fn phase2_confines_support_and_lowers_probability() {
        let model = MeanLogit { side: 8, bias: 0.0 };
        let image = test_image(8);
        let mask = Field2D::from_fn(8, 8, |x, y| if (2..5).contains(&x) && (1..4).contains(&y) { 1.0 } else { 0.0 });
        let cfg = EngineConfig { phase2_iters: 50, ..EngineConfig::default() };
        let out = phase2(&model, &image, &mask, &cfg).unwrap();
        for ((&o, &i), &m) in out.values().iter().zip(image.values()).zip(mask.values()) {
            if m == 0.0 {
                assert_eq!(o.to_bits(), i.to_bits());
            }
        }
        assert!(out.in_range(0.0, 1.0));
        assert!(model.forward(&out).unwrap().probs[1] < model.forward(&image).unwrap().probs[1]);
    }

    #[test]
    fn phase2_full_mask_is_unconstrained_descent() {
        let model = MeanLogit { side: 4, bias: 0.0 };
        let image = Field2D::filled(4, 4, 0.5);
        let cfg = EngineConfig { phase2_iters: 5, lr: 0.01, ..EngineConfig::default() };
        let out = phase2(&model, &image, &Field2D::filled(4, 4, 1.0), &cfg).unwrap();
        // Uniform gradient: every pixel takes the same Adam steps.
        for &v in out.values() {
            assert_eq!(v, out.values()[0]);
            assert!(v < 0.5);
        }
    }

    #[test]
    fn constant_model_gives_empty_mask() {
        let model = constant_head(8, 1.5);
        let image = test_image(8);
        let cfg = EngineConfig { phase1_iters: 30, phase2_iters: 10, ..EngineConfig::default() };
        let ex = explain(&model, &image, &cfg).unwrap();
        assert_eq!(ex.mask, Field2D::zeros(8, 8));
        assert_eq!(ex.perturbed_phase2, image);
        assert_eq!(ex.breakdown.classification, model.forward(&image).unwrap().probs[1]);
        assert_eq!(ex.breakdown.sparsity, l0(&image.sub(&ex.perturbed_phase2).unwrap()) as f64 / 64.0);
    }

    #[test]
    fn explain_is_deterministic() {
        let model = ClassifierParams::random(8, 8).unwrap();
        let image = test_image(8);
        let cfg = EngineConfig { phase1_iters: 25, phase2_iters: 10, ..EngineConfig::default() };
        assert_eq!(explain(&model, &image, &cfg).unwrap(), explain(&model, &image, &cfg).unwrap());
    }

    #[test]
    fn rejects_invalid_inputs() {
        let model = MeanLogit { side: 4, bias: 0.0 };
        let cfg = EngineConfig::default();
        assert!(phase1(&model, &Field2D::filled(4, 4, 1.5), &cfg).is_err());
        assert!(phase1(&model, &Field2D::zeros(5, 5), &cfg).is_err());
        assert!(phase2(&model, &Field2D::zeros(4, 4), &Field2D::filled(4, 4, 0.3), &cfg).is_err());
        assert!(phase1(&model, &Field2D::zeros(4, 4), &EngineConfig { lr: 0.0, ..cfg.clone() }).is_err());
        assert!(phase1(&model, &Field2D::zeros(4, 4), &EngineConfig { phase1_iters: 0, ..cfg }).is_err());
    }
}
