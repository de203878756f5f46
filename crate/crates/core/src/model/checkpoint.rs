//! JSON checkpoint: architecture header, named tensors with explicit shapes,
//! and the training seed/epochs. Floats are written in shortest round-trip
//! form, so save-then-load is exact.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cnn::{ClassifierParams, CONV1_CHANNELS, CONV2_CHANNELS, NUM_CLASSES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointArch {
    pub side: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub kernel: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub arch: CheckpointArch,
    pub tensors: BTreeMap<String, Tensor>,
    pub seed: u64,
    pub epochs: usize,
}

impl Checkpoint {
    pub fn from_params(params: &ClassifierParams, seed: u64, epochs: usize) -> Self {
        let tensors = params
            .named_tensors()
            .into_iter()
            .map(|(name, shape, data)| (name.to_string(), Tensor { shape, data: data.to_vec() }))
            .collect();
        Self {
            arch: CheckpointArch {
                side: params.side(),
                conv1_channels: CONV1_CHANNELS,
                conv2_channels: CONV2_CHANNELS,
                kernel: 3,
                classes: NUM_CLASSES,
            },
            tensors,
            seed,
            epochs,
        }
    }

    pub fn to_params(&self) -> Result<ClassifierParams> {
        let a = &self.arch;
        if a.conv1_channels != CONV1_CHANNELS
            || a.conv2_channels != CONV2_CHANNELS
            || a.kernel != 3
            || a.classes != NUM_CLASSES
        {
            return Err(Error::Checkpoint(format!("unsupported architecture {a:?}")));
        }
        let template = ClassifierParams::zeros(a.side)?;
        let mut flat = Vec::with_capacity(template.num_params());
        for (name, shape, _) in template.named_tensors() {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: expected shape {shape:?}, got {:?} with {} values",
                    t.shape,
                    t.data.len()
                )));
            }
            flat.extend_from_slice(&t.data);
        }
        if self.tensors.len() != template.named_tensors().len() {
            return Err(Error::Checkpoint("unexpected extra tensors".into()));
        }
        ClassifierParams::from_flat(a.side, flat)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
