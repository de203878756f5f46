use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cnn::ClassifierParams;
use super::{Classifier, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState};
use crate::toydata::ToySample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 20, lr: 1e-3, batch_size: 32, seed: 42 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean cross-entropy over the training set before any update.
    pub initial_loss: f64,
    /// Mean per-batch cross-entropy of each epoch.
    pub epoch_losses: Vec<f64>,
}

fn cross_entropy(probs: [f64; NUM_CLASSES], label: usize) -> f64 {
    -probs[label].max(f64::MIN_POSITIVE).ln()
}

/// Mini-batch Adam on softmax cross-entropy. Only images and labels are
/// read; ground-truth masks never reach the model. Batch order comes from a
/// ChaCha8 shuffle seeded with `cfg.seed`, so the result is bit-reproducible.
pub fn train(samples: &[ToySample], cfg: &TrainConfig) -> Result<(ClassifierParams, TrainReport)> {
    let first = samples.first().ok_or_else(|| Error::Empty("training set".into()))?;
    if cfg.epochs == 0 {
        return Err(Error::InvalidConfig("epochs must be positive".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    let side = first.image.width();
    let mut params = ClassifierParams::init(side, cfg.seed)?;
    for s in samples {
        params.check_input(&s.image)?;
        if s.label as usize >= NUM_CLASSES {
            return Err(Error::InvalidConfig(format!("label {} out of range", s.label)));
        }
    }
    let initial_loss = mean_loss(&params, samples)?;

    let mut adam = AdamState::new(params.num_params(), AdamConfig::with_lr(cfg.lr))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_ba7c4);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut grad = vec![0.0; params.num_params()];
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.fill(0.0);
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = &samples[i];
                let label = s.label as usize;
                let acts = params.activations(&s.image)?;
                batch_loss += cross_entropy(acts.prediction.probs, label);
                // d/dz = p - onehot; p_label - 1 is taken as -others[label]
                // to keep precision near saturation.
                let mut dlogits = acts.prediction.probs;
                dlogits[label] = -acts.others[label];
                params.backward(&s.image, &acts, dlogits, Some(&mut grad), false);
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            let update = adam.update(&grad)?;
            for (p, u) in params.flat_mut().iter_mut().zip(update) {
                *p += u;
            }
            loss_sum += batch_loss * inv;
        }
        let epoch_loss = loss_sum / order.chunks(cfg.batch_size).len() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: epoch });
        }
        epoch_losses.push(epoch_loss);
    }
    Ok((params, TrainReport { initial_loss, epoch_losses }))
}

pub fn mean_loss(model: &impl Classifier, samples: &[ToySample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += cross_entropy(model.forward(&s.image)?.probs, s.label as usize);
    }
    Ok(total / samples.len() as f64)
}

/// Rank-based (Mann-Whitney) AUC with tied scores sharing their average rank.
pub fn roc_auc_scores(scores: &[f64], labels: &[u8]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks are 1-based; the tie group i..=j shares their mean.
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// AUC of `probs[1]` against the sample labels.
pub fn roc_auc(model: &impl Classifier, samples: &[ToySample]) -> Result<f64> {
    let mut scores = Vec::with_capacity(samples.len());
    for s in samples {
        scores.push(model.forward(&s.image)?.probs[1]);
    }
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    roc_auc_scores(&scores, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydata::{generate, ToyConfig};

    /// Fraction of (positive, negative) pairs ordered correctly, ties = 1/2.
    fn auc_pairs_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        let labels = [1, 1, 0, 0];
        let hand = [0.9, 0.8, 0.3, 0.4];
        assert_eq!(auc_pairs_oracle(&hand, &labels), 1.0);
        assert_eq!(roc_auc_scores(&hand, &labels).unwrap(), 1.0);
        assert_eq!(roc_auc_scores(&[0.5; 4], &labels).unwrap(), 0.5);
        assert!(matches!(roc_auc_scores(&[0.1, 0.2], &[1, 1]), Err(Error::SingleClass)));
    }

    #[test]
    fn auc_matches_pair_oracle_with_ties() {
        let scores = [0.1, 0.4, 0.4, 0.7, 0.2, 0.4, 0.9, 0.1];
        let labels = [0, 1, 0, 1, 0, 1, 1, 1];
        let a = roc_auc_scores(&scores, &labels).unwrap();
        assert!((a - auc_pairs_oracle(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn training_is_reproducible_and_reduces_loss() {
        let data = generate(&ToyConfig { count: 64, side: 16, lesion_radius_range: [1.5, 2.5], ..ToyConfig::default() })
            .unwrap();
        let cfg = TrainConfig { epochs: 2, lr: 5e-3, batch_size: 8, seed: 9 };
        let (a, rep) = train(&data, &cfg).unwrap();
        let (b, _) = train(&data, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(mean_loss(&a, &data).unwrap() < rep.initial_loss);
    }

    #[test]
    fn rejects_empty_and_zero_epochs() {
        assert!(matches!(train(&[], &TrainConfig::default()), Err(Error::Empty(_))));
        let data = generate(&ToyConfig { count: 2, side: 16, lesion_radius_range: [1.5, 2.5], ..ToyConfig::default() })
            .unwrap();
        assert!(train(&data, &TrainConfig { epochs: 0, ..TrainConfig::default() }).is_err());
    }
}
