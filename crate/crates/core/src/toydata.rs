//! Deterministic synthetic "lesion vs. background" images with ground-truth
//! lesion masks.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`): sample `i` of a dataset
//! uses the generator seeded with `seed` on stream `i`, so a sample does not
//! depend on how many samples precede it. Images are quantized to 8 bits at
//! generation time so that what is written to disk is exactly what the
//! pipeline consumes.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field2D;

/// Extra boundary irregularity: radius is modulated by up to this fraction.
const MAX_WOBBLE: f64 = 0.36;
/// Minimum distance between a lesion's support and the image border.
const BORDER_MARGIN: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySample {
    pub image: Field2D,
    /// 0 = background only, 1 = contains at least one lesion.
    pub label: u8,
    pub gt_mask: Field2D,
}

/// Missing fields in a serialized config take their default values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub seed: u64,
    pub count: usize,
    pub side: usize,
    pub lesion_count_range: [usize; 2],
    pub lesion_radius_range: [f64; 2],
    /// Peak height of a lesion bump above the background.
    pub lesion_amplitude_range: [f64; 2],
    pub noise_amplitude: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            count: 2500,
            side: 64,
            lesion_count_range: [1, 1],
            lesion_radius_range: [1.2, 2.0],
            lesion_amplitude_range: [0.3, 0.45],
            noise_amplitude: 0.05,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.count == 0 {
            return bad("count must be positive".into());
        }
        if self.side == 0 {
            return bad("side must be positive".into());
        }
        let [cmin, cmax] = self.lesion_count_range;
        if cmin == 0 || cmin > cmax {
            return bad(format!("lesion_count_range [{cmin},{cmax}] must be non-empty and start at 1 or more"));
        }
        let [rmin, rmax] = self.lesion_radius_range;
        if !(rmin >= 1.0 && rmin <= rmax && rmax < self.side as f64 / 2.0) {
            return bad(format!("lesion_radius_range [{rmin},{rmax}] must satisfy 1 <= min <= max < side/2"));
        }
        let extent = rmax * (1.0 + MAX_WOBBLE) + 1.0 + BORDER_MARGIN;
        if 2.0 * extent >= self.side as f64 {
            return bad(format!("lesions of radius {rmax} do not fit a {0}x{0} image with margin", self.side));
        }
        let [amin, amax] = self.lesion_amplitude_range;
        if !(amin > 0.0 && amin <= amax && amax <= 1.0) {
            return bad(format!("lesion_amplitude_range [{amin},{amax}] must satisfy 0 < min <= max <= 1"));
        }
        if !(0.0..=0.5).contains(&self.noise_amplitude) {
            return bad(format!("noise_amplitude {} outside [0,0.5]", self.noise_amplitude));
        }
        Ok(())
    }
}

struct Lesion {
    cx: f64,
    cy: f64,
    radius: f64,
    amplitude: f64,
    wobble: [(f64, f64); 3],
}

impl Lesion {
    /// Bump height at (x, y), or `None` outside the lesion support.
    fn value(&self, x: f64, y: f64) -> Option<f64> {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let dist = (dx * dx + dy * dy).sqrt();
        let theta = dy.atan2(dx);
        let mut scale = 1.0;
        for (k, &(amp, phase)) in self.wobble.iter().enumerate() {
            scale += amp * ((k as f64 + 2.0) * theta + phase).cos();
        }
        let boundary = self.radius * scale;
        if dist < boundary {
            let sigma = 0.6 * self.radius;
            Some(self.amplitude * (0.4 + 0.6 * (-(dist * dist) / (2.0 * sigma * sigma)).exp()))
        } else {
            None
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

fn quantize(v: f64) -> f64 {
    (255.0 * v.clamp(0.0, 1.0)).round() / 255.0
}

/// Generates sample `index`, returning it together with the quantized
/// pre-lesion background.
fn generate_one(cfg: &ToyConfig, index: usize) -> (ToySample, Field2D) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let side = cfg.side;
    let positive = index % 2 == 1;

    let base = uniform(&mut rng, 0.25, 0.4);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let freq = uniform(&mut rng, 0.5, 2.0) * std::f64::consts::TAU / side as f64;
            let angle = uniform(&mut rng, 0.0, std::f64::consts::PI);
            let phase = uniform(&mut rng, 0.0, std::f64::consts::TAU);
            let amp = uniform(&mut rng, 0.0, 0.08 / 3.0);
            (freq * angle.cos(), freq * angle.sin(), phase, amp)
        })
        .collect();
    let noise: Vec<f64> = (0..side * side)
        .map(|_| uniform(&mut rng, -cfg.noise_amplitude, cfg.noise_amplitude))
        .collect();
    let background_raw = Field2D::from_fn(side, side, |x, y| {
        let texture: f64 = waves
            .iter()
            .map(|&(kx, ky, ph, amp)| amp * (kx * x as f64 + ky * y as f64 + ph).sin())
            .sum();
        base + texture + noise[y * side + x]
    });

    let mut lesions = Vec::new();
    if positive {
        let [cmin, cmax] = cfg.lesion_count_range;
        let n = rng.gen_range(cmin..=cmax);
        let [rmin, rmax] = cfg.lesion_radius_range;
        for _ in 0..n {
            let radius = uniform(&mut rng, rmin, rmax);
            let extent = radius * (1.0 + MAX_WOBBLE) + 1.0 + BORDER_MARGIN;
            let cx = uniform(&mut rng, extent, side as f64 - 1.0 - extent);
            let cy = uniform(&mut rng, extent, side as f64 - 1.0 - extent);
            let amplitude = uniform(&mut rng, cfg.lesion_amplitude_range[0], cfg.lesion_amplitude_range[1]);
            let mut wobble = [(0.0, 0.0); 3];
            for w in &mut wobble {
                *w = (uniform(&mut rng, 0.0, MAX_WOBBLE / 3.0), uniform(&mut rng, 0.0, std::f64::consts::TAU));
            }
            lesions.push(Lesion { cx, cy, radius, amplitude, wobble });
        }
    }

    let mut image = Field2D::zeros(side, side);
    let mut gt_mask = Field2D::zeros(side, side);
    for y in 0..side {
        for x in 0..side {
            let bump = lesions
                .iter()
                .filter_map(|l| l.value(x as f64, y as f64))
                .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
            let bg = background_raw.get(x, y);
            if let Some(b) = bump {
                gt_mask.set(x, y, 1.0);
                image.set(x, y, quantize(bg + b));
            } else {
                image.set(x, y, quantize(bg));
            }
        }
    }
    // Wobble can shrink a tiny lesion to no pixels; keep the label honest.
    let label = u8::from(gt_mask.max() > 0.0);
    let background = background_raw.map(quantize);
    (ToySample { image, label, gt_mask }, background)
}

pub fn generate(cfg: &ToyConfig) -> Result<Vec<ToySample>> {
    cfg.validate()?;
    Ok((0..cfg.count).map(|i| generate_one(cfg, i).0).collect())
}

/// Seeded shuffle, then the first `round(n * train_fraction)` indices (at
/// least one on each side) form the training split.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!("split needs at least 2 samples, got {n}")));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("train_fraction {train_fraction} outside (0,1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let validation = idx.split_off(n_train);
    Ok((idx, validation))
}

pub fn split<T: Clone>(samples: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let (tr, va) = split_indices(samples.len(), train_fraction, seed)?;
    Ok((
        tr.into_iter().map(|i| samples[i].clone()).collect(),
        va.into_iter().map(|i| samples[i].clone()).collect(),
    ))
}
