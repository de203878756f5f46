//! On-disk dataset layout and input selection.
//!
//! ```text
//! DIR/index.json        {"config": ToyConfig, "samples": [{id, label, image, mask}]}
//! DIR/images/ID.pgm
//! DIR/masks/ID.pgm      ground truth, 0/255
//! ```
//! Paths inside the index are relative to `DIR`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::field::Field2D;
use crate::pgm;
use crate::toydata::{split_indices, ToyConfig, ToySample};

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub label: u8,
    pub image: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub config: ToyConfig,
    pub samples: Vec<IndexEntry>,
}

pub fn sample_id(i: usize) -> String {
    format!("{i:05}")
}

pub fn load_index(dir: &Path) -> Result<DatasetIndex> {
    let path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading dataset index {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Every sample of the dataset, in index order.
pub fn load_samples(dir: &Path, index: &DatasetIndex) -> Result<Vec<ToySample>> {
    index
        .samples
        .iter()
        .map(|e| {
            let image = read_pgm(&dir.join(&e.image))?;
            let gt_mask = read_pgm(&dir.join(&e.mask))?;
            Ok(ToySample { image, label: e.label, gt_mask })
        })
        .collect()
}

pub fn read_pgm(path: &Path) -> Result<Field2D> {
    pgm::read(path).with_context(|| format!("reading {}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    All,
}

/// Which images a command operates on: either a dataset slice or explicit
/// files with optional ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub data: Option<PathBuf>,
    pub split: Split,
    pub train_fraction: f64,
    pub positives_only: bool,
    pub limit: Option<usize>,
    pub images: Vec<PathBuf>,
    pub gt: Vec<PathBuf>,
}

/// One resolved input.
#[derive(Debug, Clone)]
pub struct Item {
    pub id: String,
    pub image_path: PathBuf,
    pub gt_path: Option<PathBuf>,
}

impl Selection {
    /// `seed` must be the seed the model was trained with for the
    /// validation split to be the held-out one.
    pub fn resolve(&self, seed: u64) -> Result<Vec<Item>> {
        let mut items = match &self.data {
            Some(dir) => {
                if !self.images.is_empty() || !self.gt.is_empty() {
                    bail!("--data cannot be combined with --image/--gt");
                }
                let index = load_index(dir)?;
                let order: Vec<usize> = match self.split {
                    Split::All => (0..index.samples.len()).collect(),
                    split => {
                        let (tr, va) = split_indices(index.samples.len(), self.train_fraction, seed)?;
                        if split == Split::Train { tr } else { va }
                    }
                };
                order
                    .into_iter()
                    .map(|i| &index.samples[i])
                    .filter(|e| !self.positives_only || e.label == 1)
                    .map(|e| Item {
                        id: e.id.clone(),
                        image_path: dir.join(&e.image),
                        gt_path: Some(dir.join(&e.mask)),
                    })
                    .collect::<Vec<_>>()
            }
            None => {
                if self.images.is_empty() {
                    bail!("no inputs: pass --data DIR or one or more --image FILE");
                }
                if !self.gt.is_empty() && self.gt.len() != self.images.len() {
                    bail!("{} --gt files for {} --image files", self.gt.len(), self.images.len());
                }
                self.images
                    .iter()
                    .enumerate()
                    .map(|(i, p)| Item {
                        id: p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| sample_id(i)),
                        image_path: p.clone(),
                        gt_path: self.gt.get(i).cloned(),
                    })
                    .collect()
            }
        };
        if let Some(n) = self.limit {
            items.truncate(n);
        }
        if items.is_empty() {
            bail!("input selection is empty");
        }
        let mut ids: Vec<&str> = items.iter().map(|i| i.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            bail!("duplicate input id {}", w[0]);
        }
        Ok(items)
    }
}
