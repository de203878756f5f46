//! Meaningful-perturbation baseline: a soft preservation mask `m` cross-fades
//! the input with a deletion reference, `Φ = m·I + (1-m)·ref`, and is
//! optimized at full resolution against
//! `M(Φ)_c + c_sp/N · Σ(1-m) + c_tv/N · Σ|∇m|^tv_γ`. Soft masks are then
//! binarized with the single threshold that minimizes mean APE_D over the
//! whole image set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field2D;
use crate::metrics::{ape_d, ApeBreakdown, ApeWeights};
use crate::model::{Classifier, POSITIVE_CLASS};
use crate::numerics::{clip_in_place, sign0, AdamConfig, AdamState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeletionMode {
    /// Constant image at the input's minimum value.
    MinConst,
    /// Gaussian-blurred input.
    Blur,
}

impl DeletionMode {
    pub fn method_name(&self) -> &'static str {
        match self {
            DeletionMode::MinConst => "mp-min",
            DeletionMode::Blur => "mp-blur",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpConfig {
    pub deletion_mode: DeletionMode,
    pub blur_sigma: f64,
    pub sparsity_coeff: f64,
    pub tv_coeff: f64,
    pub tv_gamma: f64,
    pub lr: f64,
    pub iters: usize,
    pub convergence_tol: f64,
    pub threshold_scan_step: f64,
    pub class_index: usize,
}

impl Default for MpConfig {
    fn default() -> Self {
        Self {
            deletion_mode: DeletionMode::MinConst,
            blur_sigma: 5.0,
            sparsity_coeff: 40.0,
            tv_coeff: 120.0,
            tv_gamma: 1.0,
            lr: 0.05,
            iters: 300,
            convergence_tol: 1e-7,
            threshold_scan_step: 1e-3,
            class_index: POSITIVE_CLASS,
        }
    }
}

impl MpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.deletion_mode == DeletionMode::Blur && !(self.blur_sigma > 0.0) {
            return bad(format!("blur sigma must be positive, got {}", self.blur_sigma));
        }
        if !(self.sparsity_coeff >= 0.0 && self.tv_coeff >= 0.0) {
            return bad("sparsity and tv coefficients must be non-negative".into());
        }
        if !(self.tv_gamma > 0.0) {
            return bad(format!("tv_gamma must be positive, got {}", self.tv_gamma));
        }
        if !(self.lr > 0.0) || self.iters == 0 {
            return bad("lr must be positive and iters at least 1".into());
        }
        if !(self.threshold_scan_step > 0.0 && self.threshold_scan_step < 1.0) {
            return bad(format!("threshold_scan_step {} outside (0,1)", self.threshold_scan_step));
        }
        Ok(())
    }

    /// Number of grid points `K`; thresholds are `k / K` for `k in 1..=K`.
    pub fn scan_points(&self) -> usize {
        (1.0 / self.threshold_scan_step).round().max(1.0) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpResult {
    /// 1 = preserve, 0 = fully deleted.
    pub soft_mask: Field2D,
    pub binary_mask: Field2D,
    pub perturbed: Field2D,
    pub breakdown: ApeBreakdown,
}

/// Separable Gaussian blur, kernel radius `ceil(3σ)`, edge-replicate padding.
pub fn gaussian_blur(image: &Field2D, sigma: f64) -> Field2D {
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.iter().map(|w| w / norm).collect();
    let (w, h) = (image.width() as isize, image.height() as isize);
    let pass = |src: &Field2D, horizontal: bool| {
        Field2D::from_fn(w as usize, h as usize, |x, y| {
            let mut acc = 0.0;
            for (k, &wk) in weights.iter().enumerate() {
                let off = k as isize - radius;
                let (sx, sy) = if horizontal {
                    ((x as isize + off).clamp(0, w - 1), y as isize)
                } else {
                    (x as isize, (y as isize + off).clamp(0, h - 1))
                };
                acc += wk * src.get(sx as usize, sy as usize);
            }
            acc
        })
    };
    pass(&pass(image, true), false)
}

pub fn deletion_image(image: &Field2D, cfg: &MpConfig) -> Field2D {
    match cfg.deletion_mode {
        DeletionMode::MinConst => Field2D::filled(image.width(), image.height(), image.min()),
        DeletionMode::Blur => gaussian_blur(image, cfg.blur_sigma),
    }
}

/// `Φ = m·I + (1-m)·ref`.
pub fn cross_fade(image: &Field2D, reference: &Field2D, mask: &Field2D) -> Result<Field2D> {
    image.check_shape(reference)?;
    image.check_shape(mask)?;
    let values = image
        .values()
        .iter()
        .zip(reference.values())
        .zip(mask.values())
        .map(|((&i, &r), &m)| m * i + (1.0 - m) * r)
        .collect();
    Field2D::new(image.width(), image.height(), values)
}

/// `Σ_pairs |Δm|^γ` over forward differences, and its gradient.
fn tv_power(m: &Field2D, gamma: f64) -> (f64, Field2D) {
    let (w, h) = (m.width(), m.height());
    let v = m.values();
    let mut total = 0.0;
    let mut grad = Field2D::zeros(w, h);
    let g = grad.values_mut();
    let mut term = |a: usize, b: usize, g: &mut [f64]| {
        let d = v[b] - v[a];
        if d != 0.0 {
            total += d.abs().powf(gamma);
            let dd = gamma * d.abs().powf(gamma - 1.0) * sign0(d);
            g[b] += dd;
            g[a] -= dd;
        }
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                term(i, i + 1, g);
            }
            if y + 1 < h {
                term(i, i + w, g);
            }
        }
    }
    (total, grad)
}

/// Baseline loss and its gradient with respect to the soft mask.
pub fn mp_objective(
    model: &impl Classifier,
    image: &Field2D,
    reference: &Field2D,
    mask: &Field2D,
    cfg: &MpConfig,
) -> Result<(f64, Field2D)> {
    let n = image.len() as f64;
    let phi = cross_fade(image, reference, mask)?;
    let (pred, dphi) = model.input_gradient(&phi, cfg.class_index)?;
    let deleted: f64 = mask.values().iter().map(|m| 1.0 - m).sum();
    let (tv, dtv) = tv_power(mask, cfg.tv_gamma);
    let loss = pred.prob(cfg.class_index) + cfg.sparsity_coeff / n * deleted + cfg.tv_coeff / n * tv;
    let (a, b) = (cfg.sparsity_coeff / n, cfg.tv_coeff / n);
    let values = dphi
        .values()
        .iter()
        .zip(image.values().iter().zip(reference.values()))
        .zip(dtv.values())
        .map(|((&g, (&i, &r)), &t)| g * (i - r) - a + b * t)
        .collect();
    Ok((loss, Field2D::new(image.width(), image.height(), values)?))
}

/// Optimizes the soft mask from all-ones with Adam, clipping to [0,1].
pub fn mp_optimize(model: &impl Classifier, image: &Field2D, cfg: &MpConfig) -> Result<Field2D> {
    cfg.validate()?;
    model.check_input(image)?;
    if !image.in_range(0.0, 1.0) {
        return Err(Error::OutOfRange("input image must lie in [0,1]".into()));
    }
    let reference = deletion_image(image, cfg);
    let mut mask = Field2D::filled(image.width(), image.height(), 1.0);
    let mut adam = AdamState::for_field(&mask, AdamConfig::with_lr(cfg.lr))?;
    let mut last: Option<f64> = None;
    let mut streak = 0;
    for it in 0..cfg.iters {
        let (loss, grad) = mp_objective(model, image, &reference, &mask, cfg)?;
        if !loss.is_finite() || !grad.all_finite() {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        if let Some(prev) = last {
            streak = if (loss - prev).abs() < cfg.convergence_tol { streak + 1 } else { 0 };
            if streak >= crate::engine::CONVERGENCE_WINDOW {
                break;
            }
        }
        last = Some(loss);
        mask = adam.adam_step(&grad, &mask)?;
        clip_in_place(&mut mask, 0.0, 1.0);
    }
    Ok(mask)
}

/// Binary mask `1 - m >= t`.
pub fn binarize_soft_mask(soft: &Field2D, t: f64) -> Field2D {
    soft.map(|m| if 1.0 - m >= t { 1.0 } else { 0.0 })
}

fn hard_result(model: &impl Classifier, image: &Field2D, soft: &Field2D, t: f64, cfg: &MpConfig) -> Result<MpResult> {
    let reference = deletion_image(image, cfg);
    let binary_mask = binarize_soft_mask(soft, t);
    let keep = binary_mask.map(|b| 1.0 - b);
    let perturbed = cross_fade(image, &reference, &keep)?;
    let breakdown = ape_d(model, image, &perturbed, cfg.class_index, &ApeWeights::default())?;
    Ok(MpResult { soft_mask: soft.clone(), binary_mask, perturbed, breakdown })
}

/// Per-image APE_D totals for every grid threshold, indexed by `k - 1`.
/// Masks for successive thresholds are nested, so each distinct mask size is
/// scored once.
fn scan_image(model: &impl Classifier, image: &Field2D, soft: &Field2D, cfg: &MpConfig) -> Result<Vec<f64>> {
    let k_max = cfg.scan_points();
    let deletion: Vec<f64> = soft.values().iter().map(|m| 1.0 - m).collect();
    let mut order: Vec<usize> = (0..deletion.len()).collect();
    order.sort_by(|&a, &b| deletion[b].total_cmp(&deletion[a]));
    let sorted: Vec<f64> = order.iter().map(|&i| deletion[i]).collect();

    // counts[k-1] = |{x : deletion(x) >= k/K}|, non-increasing in k.
    let mut counts = vec![0usize; k_max];
    let mut c = 0usize;
    for k in (1..=k_max).rev() {
        let t = k as f64 / k_max as f64;
        while c < sorted.len() && sorted[c] >= t {
            c += 1;
        }
        counts[k - 1] = c;
    }

    let reference = deletion_image(image, cfg);
    let mut cache: Vec<Option<f64>> = vec![None; deletion.len() + 1];
    let mut totals = Vec::with_capacity(k_max);
    for &count in &counts {
        let total = match cache[count] {
            Some(v) => v,
            None => {
                let mut perturbed = image.clone();
                for &i in &order[..count] {
                    perturbed.values_mut()[i] = reference.values()[i];
                }
                let v = ape_d(model, image, &perturbed, cfg.class_index, &ApeWeights::default())?.total;
                cache[count] = Some(v);
                v
            }
        };
        totals.push(total);
    }
    Ok(totals)
}

/// Scans thresholds `k/K`, `k = 1..=K`, picks the one minimizing mean APE_D
/// over all images (smallest threshold on ties), and returns the per-image
/// results at that threshold.
pub fn threshold_and_score(
    model: &impl Classifier,
    images: &[Field2D],
    soft_masks: &[Field2D],
    cfg: &MpConfig,
) -> Result<(f64, Vec<MpResult>)> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Empty("threshold scan needs at least one image".into()));
    }
    if images.len() != soft_masks.len() {
        return Err(Error::InvalidConfig(format!(
            "{} images but {} soft masks",
            images.len(),
            soft_masks.len()
        )));
    }
    for (im, m) in images.iter().zip(soft_masks) {
        im.check_shape(m)?;
    }
    let per_image: Vec<Vec<f64>> = images
        .par_iter()
        .zip(soft_masks.par_iter())
        .map(|(im, m)| scan_image(model, im, m, cfg))
        .collect::<Result<_>>()?;
    let k_max = cfg.scan_points();
    let mut sums = vec![0.0; k_max];
    for totals in &per_image {
        for (s, t) in sums.iter_mut().zip(totals) {
            *s += t;
        }
    }
    let mut best_k = 1;
    for k in 1..=k_max {
        if sums[k - 1] < sums[best_k - 1] {
            best_k = k;
        }
    }
    let t_best = best_k as f64 / k_max as f64;
    let results = images
        .iter()
        .zip(soft_masks)
        .map(|(im, m)| hard_result(model, im, m, t_best, cfg))
        .collect::<Result<_>>()?;
    Ok((t_best, results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Prediction;
    use crate::numerics::{finite_diff_gradient, max_relative_error, total_variation};

    /// Probability equals the value of one watched pixel.
    struct PixelModel {
        side: usize,
        at: usize,
    }

    impl Classifier for PixelModel {
        fn input_dims(&self) -> (usize, usize) {
            (self.side, self.side)
        }
        fn forward(&self, image: &Field2D) -> Result<Prediction> {
            let p = image.values()[self.at];
            Ok(Prediction { probs: [1.0 - p, p] })
        }
        fn input_gradient(&self, image: &Field2D, class: usize) -> Result<(Prediction, Field2D)> {
            let mut g = Field2D::zeros(self.side, self.side);
            g.values_mut()[self.at] = if class == 1 { 1.0 } else { -1.0 };
            Ok((self.forward(image)?, g))
        }
    }

    fn img(side: usize) -> Field2D {
        Field2D::from_fn(side, side, |x, y| 0.2 + 0.05 * ((x + 2 * y) % 7) as f64)
    }

    #[test]
    fn deletion_of_constant_image() {
        let c = Field2D::filled(9, 7, 0.37);
        let min_cfg = MpConfig::default();
        assert_eq!(deletion_image(&c, &min_cfg), c);
        let blur_cfg = MpConfig { deletion_mode: DeletionMode::Blur, blur_sigma: 1.5, ..MpConfig::default() };
        let b = deletion_image(&c, &blur_cfg);
        for &v in b.values() {
            assert!((v - 0.37).abs() < 1e-15);
        }
        let i = img(8);
        assert_eq!(deletion_image(&i, &min_cfg), Field2D::filled(8, 8, 0.2));
    }

    #[test]
    fn blur_preserves_mean_of_interior_spike_and_is_symmetric() {
        let mut f = Field2D::zeros(21, 21);
        f.set(10, 10, 1.0);
        let b = gaussian_blur(&f, 1.0);
        assert!((b.sum() - 1.0).abs() < 1e-12);
        assert!((b.get(9, 10) - b.get(11, 10)).abs() < 1e-15);
        assert!((b.get(10, 9) - b.get(9, 10)).abs() < 1e-15);
    }

    #[test]
    fn cross_fade_endpoints() {
        let i = img(6);
        let r = Field2D::filled(6, 6, 0.05);
        assert_eq!(cross_fade(&i, &r, &Field2D::filled(6, 6, 1.0)).unwrap(), i);
        assert_eq!(cross_fade(&i, &r, &Field2D::zeros(6, 6)).unwrap(), r);
    }

    #[test]
    fn tv_power_with_unit_gamma_is_total_variation() {
        let m = Field2D::from_fn(6, 5, |x, y| ((x * 3 + y * 7) % 5) as f64 / 4.0);
        let (tv, _) = tv_power(&m, 1.0);
        assert_eq!(tv, total_variation(&m));
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let model = crate::model::ClassifierParams::random(8, 13).unwrap();
        let image = img(8);
        let cfg = MpConfig { deletion_mode: DeletionMode::Blur, blur_sigma: 1.0, tv_gamma: 3.0, ..MpConfig::default() };
        let reference = deletion_image(&image, &cfg);
        let mask = Field2D::from_fn(8, 8, |x, y| 0.1 + 0.8 * (((x * 5 + y * 11) % 13) as f64 / 12.0) + 0.003 * x as f64);
        let (_, analytic) = mp_objective(&model, &image, &reference, &mask, &cfg).unwrap();
        let numeric =
            finite_diff_gradient(|m| mp_objective(&model, &image, &reference, m, &cfg).unwrap().0, &mask, 1e-6);
        assert!(max_relative_error(&analytic, &numeric, 1e-12) < 1e-4);
    }

    #[test]
    fn zero_gradient_keeps_mask_at_one() {
        // Watched pixel already at 0 and equal to the reference minimum.
        let mut image = img(6);
        image.set(0, 0, 0.0);
        let model = PixelModel { side: 6, at: 0 };
        let cfg = MpConfig { sparsity_coeff: 0.0, tv_coeff: 0.0, iters: 20, ..MpConfig::default() };
        assert_eq!(mp_optimize(&model, &image, &cfg).unwrap(), Field2D::filled(6, 6, 1.0));
    }

    #[test]
    fn no_deletion_scores_the_input() {
        let model = PixelModel { side: 8, at: 9 };
        let image = img(8);
        let soft = Field2D::filled(8, 8, 1.0);
        let cfg = MpConfig { threshold_scan_step: 0.1, ..MpConfig::default() };
        let (_, res) = threshold_and_score(&model, &[image.clone()], &[soft], &cfg).unwrap();
        assert_eq!(res[0].binary_mask, Field2D::zeros(8, 8));
        assert_eq!(res[0].breakdown.total, image.values()[9]);
    }

    #[test]
    fn scan_finds_single_decisive_pixel() {
        // Deleting the watched pixel (to the image minimum, 0) drops p to 0.
        let side = 8;
        let at = 3 * side + 4;
        let mut image = img(side);
        image.values_mut()[0] = 0.0;
        image.values_mut()[at] = 0.9;
        let model = PixelModel { side, at };
        let mut soft = Field2D::filled(side, side, 1.0);
        soft.values_mut()[at] = 0.0;
        let cfg = MpConfig { threshold_scan_step: 0.01, ..MpConfig::default() };
        let (t, res) = threshold_and_score(&model, &[image.clone()], &[soft.clone()], &cfg).unwrap();
        let n = (side * side) as f64;
        // Exhaustive oracle over the same grid.
        let mut best = (f64::INFINITY, 0.0);
        for k in 1..=100 {
            let tk = k as f64 / 100.0;
            let r = hard_result(&model, &image, &soft, tk, &cfg).unwrap();
            if r.breakdown.total < best.0 {
                best = (r.breakdown.total, tk);
            }
        }
        assert_eq!(t, best.1);
        assert_eq!(crate::numerics::l0(&res[0].binary_mask), 1);
        assert!((res[0].breakdown.total - 5.0 / n).abs() < 1e-12);
        assert_eq!(res[0].perturbed.values()[at], 0.0);
    }

    #[test]
    fn threshold_one_selects_fully_deleted_pixels() {
        let soft = Field2D::new(3, 1, vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(binarize_soft_mask(&soft, 1.0).values(), &[1.0, 0.0, 0.0]);
        assert_eq!(MpConfig { threshold_scan_step: 1e-3, ..MpConfig::default() }.scan_points(), 1000);
    }

    #[test]
    fn rejects_empty_and_misaligned() {
        let model = PixelModel { side: 4, at: 0 };
        let cfg = MpConfig::default();
        assert!(matches!(threshold_and_score(&model, &[], &[], &cfg), Err(Error::Empty(_))));
        assert!(threshold_and_score(&model, &[img(4)], &[], &cfg).is_err());
    }

    proptest::proptest! {
        #[test]
        fn cross_fade_interpolates(i in 0.0f64..1.0, r in 0.0f64..1.0, m in 0.0f64..1.0) {
            let one = |v| Field2D::filled(1, 1, v);
            let phi = cross_fade(&one(i), &one(r), &one(m)).unwrap().get(0, 0);
            proptest::prop_assert!(phi >= i.min(r) - 1e-15 && phi <= i.max(r) + 1e-15);
        }
    }
}
