use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Classifier, Prediction};
use crate::error::{Error, Result};
use crate::field::Field2D;

pub const CONV1_CHANNELS: usize = 8;
pub const CONV2_CHANNELS: usize = 16;
pub const NUM_CLASSES: usize = 2;
const K: usize = 3;
const KK: usize = K * K;

/// Weights of `conv3x3(8) -> relu -> pool2 -> conv3x3(16) -> relu -> pool2 ->
/// dense(2) -> softmax`, stored as one flat vector so the trainer can drive a
/// single Adam state over it.
///
/// Layout: conv1 weights `[8][1][3][3]`, conv1 bias `[8]`, conv2 weights
/// `[16][8][3][3]`, conv2 bias `[16]`, dense weights `[2][16 * (side/4)^2]`,
/// dense bias `[2]`. Dense inputs are the pooled conv2 maps in
/// channel-major, row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    side: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    c1w: usize,
    c1b: usize,
    c2w: usize,
    c2b: usize,
    dw: usize,
    db: usize,
    len: usize,
}

impl Layout {
    fn new(side: usize) -> Self {
        let features = CONV2_CHANNELS * (side / 4) * (side / 4);
        let c1w = 0;
        let c1b = c1w + CONV1_CHANNELS * KK;
        let c2w = c1b + CONV1_CHANNELS;
        let c2b = c2w + CONV2_CHANNELS * CONV1_CHANNELS * KK;
        let dw = c2b + CONV2_CHANNELS;
        let db = dw + NUM_CLASSES * features;
        Self { c1w, c1b, c2w, c2b, dw, db, len: db + NUM_CLASSES }
    }

    fn features(&self) -> usize {
        self.db - self.dw
    }

    fn features_per_class(&self) -> usize {
        self.features() / NUM_CLASSES
    }
}

/// Intermediate values kept for the backward pass. Pooling is applied to
/// pre-activations; `relu(max(a)) == max(relu(a))`.
pub(crate) struct Activations {
    pooled1: Vec<f64>,
    argmax1: Vec<u32>,
    pooled2: Vec<f64>,
    argmax2: Vec<u32>,
    pub(crate) prediction: Prediction,
    pub(crate) others: [f64; NUM_CLASSES],
}

/// Parameter and/or input gradients from one backward pass.
pub(crate) struct Backward {
    pub(crate) input: Option<Vec<f64>>,
}

fn check_side(side: usize) -> Result<()> {
    if side < 4 || side % 4 != 0 {
        return Err(Error::InvalidConfig(format!(
            "image side must be a positive multiple of 4, got {side}"
        )));
    }
    Ok(())
}

impl ClassifierParams {
    pub fn zeros(side: usize) -> Result<Self> {
        check_side(side)?;
        Ok(Self { side, data: vec![0.0; Layout::new(side).len] })
    }

    /// He-uniform weights in every layer and zero biases, drawn from ChaCha8
    /// seeded with `seed`. Gradient checks use this: with [`Self::init`]'s
    /// zero dense layer every input gradient vanishes.
    pub fn random(side: usize, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(side)?;
        let l = p.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, data: &mut [f64]| {
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in &mut data[range] {
                *v = bound * (2.0 * rng.gen::<f64>() - 1.0);
            }
        };
        fill(l.c1w..l.c1b, KK, &mut p.data);
        fill(l.c2w..l.c2b, CONV1_CHANNELS * KK, &mut p.data);
        fill(l.dw..l.db, l.features_per_class(), &mut p.data);
        Ok(p)
    }

    /// Training start: [`Self::random`] with the dense weights zeroed, so
    /// the untrained head is exactly indifferent to its input.
    pub fn init(side: usize, seed: u64) -> Result<Self> {
        let mut p = Self::random(side, seed)?;
        let l = p.layout();
        p.data[l.dw..l.db].fill(0.0);
        Ok(p)
    }

    pub fn from_flat(side: usize, data: Vec<f64>) -> Result<Self> {
        check_side(side)?;
        let l = Layout::new(side);
        if data.len() != l.len {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters for side {side}, got {}",
                l.len,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(Self { side, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn layout(&self) -> Layout {
        Layout::new(self.side)
    }

    /// Named tensors with their shapes, in storage order.
    pub fn named_tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let l = self.layout();
        let q = self.side / 4;
        vec![
            ("conv1.weight", vec![CONV1_CHANNELS, 1, K, K], &self.data[l.c1w..l.c1b]),
            ("conv1.bias", vec![CONV1_CHANNELS], &self.data[l.c1b..l.c2w]),
            ("conv2.weight", vec![CONV2_CHANNELS, CONV1_CHANNELS, K, K], &self.data[l.c2w..l.c2b]),
            ("conv2.bias", vec![CONV2_CHANNELS], &self.data[l.c2b..l.dw]),
            ("dense.weight", vec![NUM_CLASSES, CONV2_CHANNELS * q * q], &self.data[l.dw..l.db]),
            ("dense.bias", vec![NUM_CLASSES], &self.data[l.db..l.len]),
        ]
    }

    /// Mutable access to the dense bias, for constructing fixed-output heads.
    pub fn dense_bias_mut(&mut self) -> &mut [f64] {
        let l = self.layout();
        &mut self.data[l.db..l.len]
    }

    pub(crate) fn activations(&self, image: &Field2D) -> Result<Activations> {
        self.check_input(image)?;
        let l = self.layout();
        let s = self.side;
        let h = s / 2;
        let q = s / 4;
        let d = &self.data;

        let mut a1 = vec![0.0; CONV1_CHANNELS * s * s];
        conv3x3_forward(image.values(), 1, s, &d[l.c1w..l.c1b], &d[l.c1b..l.c2w], CONV1_CHANNELS, &mut a1);
        let (pooled1, argmax1) = relu_maxpool(&a1, CONV1_CHANNELS, s);

        let mut a2 = vec![0.0; CONV2_CHANNELS * h * h];
        conv3x3_forward(&pooled1, CONV1_CHANNELS, h, &d[l.c2w..l.c2b], &d[l.c2b..l.dw], CONV2_CHANNELS, &mut a2);
        let (pooled2, argmax2) = relu_maxpool(&a2, CONV2_CHANNELS, h);
        debug_assert_eq!(pooled2.len(), CONV2_CHANNELS * q * q);

        let f = l.features_per_class();
        let mut logits = [0.0; NUM_CLASSES];
        for (k, logit) in logits.iter_mut().enumerate() {
            let w = &d[l.dw + k * f..l.dw + (k + 1) * f];
            *logit = d[l.db + k] + dot(w, &pooled2);
        }
        let (prediction, others) = Prediction::from_logits(logits);
        Ok(Activations { pooled1, argmax1, pooled2, argmax2, prediction, others })
    }

    /// Backpropagates `dlogits`. Parameter gradients are accumulated into
    /// `param_grad` when given; the input gradient is computed when
    /// `want_input` is set.
    pub(crate) fn backward(
        &self,
        image: &Field2D,
        acts: &Activations,
        dlogits: [f64; NUM_CLASSES],
        mut param_grad: Option<&mut [f64]>,
        want_input: bool,
    ) -> Backward {
        let l = self.layout();
        let s = self.side;
        let h = s / 2;
        let d = &self.data;
        let f = l.features_per_class();

        let mut dfeat = vec![0.0; f];
        for (k, &g) in dlogits.iter().enumerate() {
            let w = &d[l.dw + k * f..l.dw + (k + 1) * f];
            axpy(g, w, &mut dfeat);
            if let Some(pg) = param_grad.as_deref_mut() {
                axpy(g, &acts.pooled2, &mut pg[l.dw + k * f..l.dw + (k + 1) * f]);
                pg[l.db + k] += g;
            }
        }

        let mut da2 = vec![0.0; CONV2_CHANNELS * h * h];
        unpool_relu(&dfeat, &acts.pooled2, &acts.argmax2, &mut da2);

        let mut dp1 = vec![0.0; CONV1_CHANNELS * h * h];
        conv3x3_backward_input(&da2, CONV2_CHANNELS, h, &d[l.c2w..l.c2b], CONV1_CHANNELS, &mut dp1);
        if let Some(pg) = param_grad.as_deref_mut() {
            let (w_grad, rest) = pg[l.c2w..l.dw].split_at_mut(l.c2b - l.c2w);
            conv3x3_backward_params(&da2, CONV2_CHANNELS, h, &acts.pooled1, CONV1_CHANNELS, w_grad, rest);
        }

        let need_conv1 = want_input || param_grad.is_some();
        let mut input = None;
        if need_conv1 {
            let mut da1 = vec![0.0; CONV1_CHANNELS * s * s];
            unpool_relu(&dp1, &acts.pooled1, &acts.argmax1, &mut da1);
            if let Some(pg) = param_grad.as_deref_mut() {
                let (w_grad, rest) = pg[l.c1w..l.c2w].split_at_mut(l.c1b - l.c1w);
                conv3x3_backward_params(&da1, CONV1_CHANNELS, s, image.values(), 1, w_grad, rest);
            }
            if want_input {
                let mut dimg = vec![0.0; s * s];
                conv3x3_backward_input(&da1, CONV1_CHANNELS, s, &d[l.c1w..l.c1b], 1, &mut dimg);
                input = Some(dimg);
            }
        }
        Backward { input }
    }
}

fn check_class(class: usize) -> Result<()> {
    if class >= NUM_CLASSES {
        return Err(Error::InvalidConfig(format!("class index {class} out of range")));
    }
    Ok(())
}

/// `d probs[class] / d logits` for a softmax, written so the two-class case
/// is exactly antisymmetric.
pub(crate) fn prob_logit_grad(acts: &Activations, class: usize) -> [f64; NUM_CLASSES] {
    let p = acts.prediction.probs;
    let mut g = [0.0; NUM_CLASSES];
    for (k, gk) in g.iter_mut().enumerate() {
        *gk = if k == class { p[class] * acts.others[class] } else { -p[class] * p[k] };
    }
    g
}

impl Classifier for ClassifierParams {
    fn input_dims(&self) -> (usize, usize) {
        (self.side, self.side)
    }

    fn forward(&self, image: &Field2D) -> Result<Prediction> {
        Ok(self.activations(image)?.prediction)
    }

    fn input_gradient(&self, image: &Field2D, class: usize) -> Result<(Prediction, Field2D)> {
        check_class(class)?;
        let acts = self.activations(image)?;
        let dlogits = prob_logit_grad(&acts, class);
        let back = self.backward(image, &acts, dlogits, None, true);
        let grad = Field2D::new(self.side, self.side, back.input.expect("input gradient requested"))?;
        Ok((acts.prediction, grad))
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Valid output/input column range for a horizontal tap offset `dx`.
#[inline]
fn span(n: usize, offset: isize) -> (usize, usize) {
    let lo = if offset < 0 { (-offset) as usize } else { 0 };
    let hi = if offset > 0 { n - offset as usize } else { n };
    (lo, hi)
}

/// Same-padded 3x3 convolution (cross-correlation), stride 1.
fn conv3x3_forward(input: &[f64], cin: usize, n: usize, w: &[f64], b: &[f64], cout: usize, out: &mut [f64]) {
    let nn = n * n;
    for o in 0..cout {
        let plane = &mut out[o * nn..(o + 1) * nn];
        plane.fill(b[o]);
        for c in 0..cin {
            let src = &input[c * nn..(c + 1) * nn];
            for ky in 0..K {
                let dy = ky as isize - 1;
                let (ylo, yhi) = span(n, dy);
                for kx in 0..K {
                    let dx = kx as isize - 1;
                    let wv = w[((o * cin + c) * K + ky) * K + kx];
                    let (xlo, xhi) = span(n, dx);
                    for y in ylo..yhi {
                        let sy = (y as isize + dy) as usize;
                        let dst = &mut plane[y * n + xlo..y * n + xhi];
                        let s0 = (sy * n) as isize + xlo as isize + dx;
                        let srow = &src[s0 as usize..s0 as usize + (xhi - xlo)];
                        axpy(wv, srow, dst);
                    }
                }
            }
        }
    }
}

/// Gradient of [`conv3x3_forward`] with respect to its input.
fn conv3x3_backward_input(dout: &[f64], cout: usize, n: usize, w: &[f64], cin: usize, din: &mut [f64]) {
    let nn = n * n;
    for o in 0..cout {
        let g = &dout[o * nn..(o + 1) * nn];
        for c in 0..cin {
            let dst = &mut din[c * nn..(c + 1) * nn];
            for ky in 0..K {
                let dy = ky as isize - 1;
                let (ylo, yhi) = span(n, dy);
                for kx in 0..K {
                    let dx = kx as isize - 1;
                    let wv = w[((o * cin + c) * K + ky) * K + kx];
                    let (xlo, xhi) = span(n, dx);
                    for y in ylo..yhi {
                        let sy = (y as isize + dy) as usize;
                        let s0 = ((sy * n) as isize + xlo as isize + dx) as usize;
                        let grow = &g[y * n + xlo..y * n + xhi];
                        axpy(wv, grow, &mut dst[s0..s0 + (xhi - xlo)]);
                    }
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients of [`conv3x3_forward`].
fn conv3x3_backward_params(
    dout: &[f64],
    cout: usize,
    n: usize,
    input: &[f64],
    cin: usize,
    dw: &mut [f64],
    db: &mut [f64],
) {
    let nn = n * n;
    for o in 0..cout {
        let g = &dout[o * nn..(o + 1) * nn];
        db[o] += g.iter().sum::<f64>();
        for c in 0..cin {
            let src = &input[c * nn..(c + 1) * nn];
            for ky in 0..K {
                let dy = ky as isize - 1;
                let (ylo, yhi) = span(n, dy);
                for kx in 0..K {
                    let dx = kx as isize - 1;
                    let (xlo, xhi) = span(n, dx);
                    let mut acc = 0.0;
                    for y in ylo..yhi {
                        let sy = (y as isize + dy) as usize;
                        let s0 = ((sy * n) as isize + xlo as isize + dx) as usize;
                        acc += dot(&g[y * n + xlo..y * n + xhi], &src[s0..s0 + (xhi - xlo)]);
                    }
                    dw[((o * cin + c) * K + ky) * K + kx] += acc;
                }
            }
        }
    }
}

/// 2x2 max pooling followed by ReLU; records the flat argmax of each window
/// (first maximum in row-major order).
fn relu_maxpool(a: &[f64], channels: usize, n: usize) -> (Vec<f64>, Vec<u32>) {
    let m = n / 2;
    let mut out = Vec::with_capacity(channels * m * m);
    let mut arg = Vec::with_capacity(channels * m * m);
    for c in 0..channels {
        let base = c * n * n;
        for y in 0..m {
            for x in 0..m {
                let i0 = base + 2 * y * n + 2 * x;
                let mut best = i0;
                for idx in [i0 + 1, i0 + n, i0 + n + 1] {
                    if a[idx] > a[best] {
                        best = idx;
                    }
                }
                out.push(a[best].max(0.0));
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

fn unpool_relu(dpooled: &[f64], pooled: &[f64], argmax: &[u32], dpre: &mut [f64]) {
    for ((&g, &p), &idx) in dpooled.iter().zip(pooled).zip(argmax) {
        if p > 0.0 {
            dpre[idx as usize] += g;
        }
    }
}
