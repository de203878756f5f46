//! Run manifests: the fully resolved parameters of one command, enough to
//! re-run it and reproduce every output file byte for byte.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use super::dataset::Selection;
use crate::baseline::MpConfig;
use crate::engine::EngineConfig;
use crate::model::TrainConfig;
use crate::toydata::ToyConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataRun {
    pub toy: ToyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub data: PathBuf,
    pub train_fraction: f64,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainRun {
    pub checkpoint: PathBuf,
    pub selection: Selection,
    pub engine: EngineConfig,
    pub trace: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRun {
    pub checkpoint: PathBuf,
    pub selection: Selection,
    pub mp: MpConfig,
    /// Split seed; the baseline itself is deterministic.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateRun {
    pub metrics: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", content = "config", rename_all = "kebab-case")]
pub enum Run {
    GenData(GenDataRun),
    Train(TrainRun),
    Explain(ExplainRun),
    Baseline(BaselineRun),
    Evaluate(EvaluateRun),
}

impl Run {
    pub fn seed(&self) -> Option<u64> {
        match self {
            Run::GenData(r) => Some(r.toy.seed),
            Run::Train(r) => Some(r.train.seed),
            Run::Explain(r) => Some(r.engine.seed),
            Run::Baseline(r) => Some(r.seed),
            Run::Evaluate(_) => None,
        }
    }
}

/// Output paths are relative to the directory holding the manifest, and the
/// worker count is deliberately absent, so replaying into another directory
/// with any `--jobs` yields an identical manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: Option<u64>,
    #[serde(flatten)]
    pub run: Run,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(run: Run, inputs: Vec<PathBuf>, mut outputs: Vec<String>) -> Self {
        outputs.sort();
        Self { tool_version: env!("CARGO_PKG_VERSION").to_string(), seed: run.seed(), run, inputs, outputs }
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        crate::io::write_atomic(&out.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(())
    }

    /// Accepts either the manifest file or the directory containing it.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file).with_context(|| format!("reading manifest {}", file.display()))?;
        let manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", file.display()))?;
        let dir = file.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        Ok((manifest, dir))
    }
}

/// Absolute form of an input path, so manifests stay valid from any
/// working directory.
pub fn absolute(path: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(path).with_context(|| format!("resolving {}", path.display()))
}
