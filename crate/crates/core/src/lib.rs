//! Saliency masks from regularized adversarial perturbations.
//!
//! Given a frozen differentiable classifier and an image, [`engine::explain`]
//! finds a small, smooth region whose perturbation destroys the class
//! evidence and scores it with the APE metrics in [`metrics`]. A
//! meaningful-perturbation baseline ([`baseline`]), a synthetic lesion
//! dataset ([`toydata`]) and a small CNN ([`model`]) complete a
//! desk-scale experimental setup; [`cli`] wires them into reproducible runs.

pub mod baseline;
pub mod cli;
pub mod engine;
pub mod error;
pub mod field;
pub mod io;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pgm;
pub mod regularizers;
pub mod report;
pub mod toydata;

pub use error::{Error, Result};
pub use field::Field2D;
