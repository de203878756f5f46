//! APE scores (destroying and sufficient variants), connected-component
//! labeling, and the ground-truth component hit rate.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field2D;
use crate::model::Classifier;
use crate::numerics::{l0, total_variation};
use crate::regularizers::hard_binarize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApeWeights {
    pub alpha_sp: f64,
    pub alpha_sm: f64,
    pub alpha_cl: f64,
}

impl Default for ApeWeights {
    fn default() -> Self {
        Self { alpha_sp: 1.0, alpha_sm: 1.0, alpha_cl: 1.0 }
    }
}

impl ApeWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha_sp, self.alpha_sm, self.alpha_cl];
        if w.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) || w.iter().all(|&a| a == 0.0) {
            return Err(Error::InvalidConfig(format!("invalid APE weights {w:?}")));
        }
        Ok(())
    }
}

/// The three normalized APE terms and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApeBreakdown {
    pub sparsity: f64,
    pub smoothness: f64,
    pub classification: f64,
    pub total: f64,
}

impl ApeBreakdown {
    fn weighted(sparsity: f64, smoothness: f64, classification: f64, w: &ApeWeights) -> Self {
        let total = w.alpha_sp * sparsity + w.alpha_sm * smoothness + w.alpha_cl * classification;
        Self { sparsity, smoothness, classification, total }
    }
}

fn check_pair(model: &impl Classifier, image: &Field2D, perturbed: &Field2D) -> Result<()> {
    model.check_input(image)?;
    image.check_shape(perturbed)?;
    if !perturbed.in_range(0.0, 1.0) {
        return Err(Error::OutOfRange("perturbed image must be clipped to [0,1]".into()));
    }
    Ok(())
}

/// Destroying-region score: `L0(I - Î)/N + TV(B(I - Î))/N + M(Î)_class`,
/// each term weighted. `perturbed` must already be clipped to [0,1].
pub fn ape_d(
    model: &impl Classifier,
    image: &Field2D,
    perturbed: &Field2D,
    class: usize,
    weights: &ApeWeights,
) -> Result<ApeBreakdown> {
    check_pair(model, image, perturbed)?;
    weights.validate()?;
    let n = image.len() as f64;
    let diff = image.sub(perturbed)?;
    let sparsity = l0(&diff) as f64 / n;
    let smoothness = total_variation(&hard_binarize(&diff)) / n;
    let classification = model.forward(perturbed)?.prob(class);
    Ok(ApeBreakdown::weighted(sparsity, smoothness, classification, weights))
}

/// Sufficient-region score: the terms measure the *unperturbed* support and
/// the absolute change of the class probability.
pub fn ape_s(
    model: &impl Classifier,
    image: &Field2D,
    perturbed: &Field2D,
    class: usize,
    weights: &ApeWeights,
) -> Result<ApeBreakdown> {
    check_pair(model, image, perturbed)?;
    weights.validate()?;
    let n = image.len() as f64;
    let kept = hard_binarize(&image.sub(perturbed)?).map(|b| 1.0 - b);
    let sparsity = l0(&kept) as f64 / n;
    let smoothness = total_variation(&kept) / n;
    let classification = (model.forward(perturbed)?.prob(class) - model.forward(image)?.prob(class)).abs();
    Ok(ApeBreakdown::weighted(sparsity, smoothness, classification, weights))
}

/// 4-connected labeling. Labels run 1..=k in order of each component's
/// first pixel in row-major scan; background stays 0.
pub fn connected_components(mask: &Field2D) -> Result<(Vec<u32>, usize)> {
    mask.check_binary()?;
    let (w, h) = (mask.width(), mask.height());
    let m = mask.values();
    let mut labels = vec![0u32; w * h];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if m[start] == 0.0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if m[j] != 0.0 && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
    }
    Ok((labels, next as usize))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CcReport {
    pub component_count: usize,
    pub hit_count: usize,
    /// `hit_count / component_count`, 0 for an empty mask.
    pub hit_rate: f64,
}

/// Fraction of the mask's connected components sharing a pixel with `gt`.
pub fn cc_hit_rate(mask: &Field2D, gt: &Field2D) -> Result<CcReport> {
    mask.check_shape(gt)?;
    gt.check_binary()?;
    let (labels, count) = connected_components(mask)?;
    let mut hit = vec![false; count + 1];
    for (&l, &g) in labels.iter().zip(gt.values()) {
        if l != 0 && g != 0.0 {
            hit[l as usize] = true;
        }
    }
    let hit_count = hit.iter().filter(|&&h| h).count();
    let hit_rate = if count == 0 { 0.0 } else { hit_count as f64 / count as f64 };
    Ok(CcReport { component_count: count, hit_count, hit_rate })
}
