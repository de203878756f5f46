//! The differentiable classifier: a small fixed CNN with hand-written forward
//! and backward passes, its trainer, ROC-AUC evaluation and JSON checkpoints.

mod checkpoint;
mod cnn;
mod train;

pub use checkpoint::{Checkpoint, CheckpointArch, Tensor};
pub use cnn::{ClassifierParams, CONV1_CHANNELS, CONV2_CHANNELS, NUM_CLASSES};
pub use train::{mean_loss, roc_auc, roc_auc_scores, train, TrainConfig, TrainReport};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::field::Field2D;

/// Index of the "lesion present" output.
pub const POSITIVE_CLASS: usize = 1;

/// Softmax output over the two classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: [f64; NUM_CLASSES],
}

impl Prediction {
    /// Numerically stable two-way softmax. `others[i]` is `1 - probs[i]`
    /// computed without cancellation.
    pub(crate) fn from_logits(logits: [f64; NUM_CLASSES]) -> (Self, [f64; NUM_CLASSES]) {
        let p0 = 1.0 / (1.0 + (logits[1] - logits[0]).exp());
        let p1 = 1.0 / (1.0 + (logits[0] - logits[1]).exp());
        (Self { probs: [p0, p1] }, [p1, p0])
    }

    pub fn prob(&self, class: usize) -> f64 {
        self.probs[class]
    }
}

/// A frozen differentiable model over single-channel images.
pub trait Classifier: Sync {
    /// (width, height) of accepted images.
    fn input_dims(&self) -> (usize, usize);

    fn forward(&self, image: &Field2D) -> Result<Prediction>;

    /// The prediction together with `d probs[class] / d image`.
    fn input_gradient(&self, image: &Field2D, class: usize) -> Result<(Prediction, Field2D)>;

    fn check_input(&self, image: &Field2D) -> Result<()> {
        let (w, h) = self.input_dims();
        image.check_dims(w, h)
    }
}
