//! `raex` command line: dataset generation, training, explanation, the
//! baseline, evaluation, and manifest replay.
//!
//! Every command that writes a directory leaves a `manifest.json` there;
//! `raex replay DIR --out OTHER` re-runs it and `--verify` checks the new
//! files against the originals byte for byte.

pub mod commands;
pub mod dataset;
pub mod manifest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::baseline::{DeletionMode, MpConfig};
use crate::engine::EngineConfig;
use crate::model::TrainConfig;
use crate::regularizers::BinarizeParams;
use crate::toydata::ToyConfig;
use dataset::{Selection, Split};
use manifest::{absolute, BaselineRun, EvaluateRun, ExplainRun, GenDataRun, Run, RunManifest, TrainRun};

#[derive(Debug, Parser)]
#[command(name = "raex", version, about = "Saliency masks from regularized adversarial perturbations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic lesion dataset.
    GenData(GenDataArgs),
    /// Train the classifier on a generated dataset.
    Train(TrainArgs),
    /// Explain images with regularized adversarial masks.
    Explain(ExplainArgs),
    /// Explain images with the meaningful-perturbation baseline.
    Baseline(BaselineArgs),
    /// Aggregate metrics files into a comparison table.
    Evaluate(EvaluateArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Shared {
    /// Seed for every random choice (generation, training order, splits).
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub shared: Shared,
    /// JSON dataset config; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub side: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
}

#[derive(Debug, Clone, Args)]
pub struct SelectionArgs {
    /// Dataset directory; ground-truth masks come from its index.
    #[arg(long, conflicts_with_all = ["image", "gt"])]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Validation)]
    pub split: Split,
    /// Must match the value used for training.
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long)]
    pub positives_only: bool,
    /// Keep only the first N selected images.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Explicit image files (repeatable).
    #[arg(long)]
    pub image: Vec<PathBuf>,
    /// Ground-truth masks, one per --image, in the same order.
    #[arg(long)]
    pub gt: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub selection: SelectionArgs,
    #[arg(long, default_value_t = EngineConfig::default().alpha)]
    pub alpha: f64,
    #[arg(long, default_value_t = EngineConfig::default().beta)]
    pub beta: f64,
    #[arg(long, default_value_t = BinarizeParams::default().gamma)]
    pub gamma: f64,
    #[arg(long, default_value_t = BinarizeParams::default().epsilon)]
    pub epsilon: f64,
    #[arg(long, default_value_t = EngineConfig::default().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = EngineConfig::default().phase1_iters)]
    pub phase1_iters: usize,
    #[arg(long, default_value_t = EngineConfig::default().phase2_iters)]
    pub phase2_iters: usize,
    /// Stop a phase once |Δloss| stays below this for 10 steps.
    #[arg(long, default_value_t = EngineConfig::default().convergence_tol)]
    pub tol: f64,
    #[arg(long, default_value_t = EngineConfig::default().class_index)]
    pub class_index: usize,
    /// Also write the phase-1 loss per iteration to traces/ID.csv.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Deletion {
    Min,
    Blur,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub selection: SelectionArgs,
    #[arg(long, value_enum, default_value_t = Deletion::Min)]
    pub deletion: Deletion,
    /// Gaussian sigma for `--deletion blur`.
    #[arg(long, default_value_t = MpConfig::default().blur_sigma)]
    pub sigma: f64,
    #[arg(long, default_value_t = MpConfig::default().sparsity_coeff)]
    pub sparsity_coeff: f64,
    #[arg(long, default_value_t = MpConfig::default().tv_coeff)]
    pub tv_coeff: f64,
    #[arg(long, default_value_t = MpConfig::default().tv_gamma)]
    pub tv_gamma: f64,
    /// Threshold grid spacing.
    #[arg(long, default_value_t = MpConfig::default().threshold_scan_step)]
    pub scan_step: f64,
    #[arg(long, default_value_t = MpConfig::default().iters)]
    pub iters: usize,
    #[arg(long, default_value_t = MpConfig::default().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = MpConfig::default().convergence_tol)]
    pub tol: f64,
    #[arg(long, default_value_t = MpConfig::default().class_index)]
    pub class_index: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Metrics files (JSON Lines); one table row each.
    #[arg(required = true)]
    pub metrics: Vec<PathBuf>,
    /// Also write table.txt, comparison.json and a manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// A manifest file or the directory containing one.
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Compare every recorded output with the original, byte for byte.
    #[arg(long)]
    pub verify: bool,
}

impl SelectionArgs {
    fn resolve(&self) -> Result<Selection> {
        Ok(Selection {
            data: self.data.as_deref().map(absolute).transpose()?,
            split: self.split,
            train_fraction: self.train_fraction,
            positives_only: self.positives_only,
            limit: self.limit,
            images: self.image.iter().map(|p| absolute(p)).collect::<Result<_>>()?,
            gt: self.gt.iter().map(|p| absolute(p)).collect::<Result<_>>()?,
        })
    }
}

fn gen_data_run(a: &GenDataArgs) -> Result<GenDataRun> {
    let mut toy: ToyConfig = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ToyConfig::default(),
    };
    toy.seed = a.shared.seed;
    if let Some(c) = a.count {
        toy.count = c;
    }
    if let Some(s) = a.side {
        toy.side = s;
    }
    toy.validate()?;
    Ok(GenDataRun { toy })
}

fn explain_run(a: &ExplainArgs) -> Result<ExplainRun> {
    let engine = EngineConfig {
        alpha: a.alpha,
        beta: a.beta,
        binarize: BinarizeParams { gamma: a.gamma, epsilon: a.epsilon },
        lr: a.lr,
        phase1_iters: a.phase1_iters,
        phase2_iters: a.phase2_iters,
        convergence_tol: a.tol,
        seed: a.shared.seed,
        class_index: a.class_index,
    };
    Ok(ExplainRun { checkpoint: absolute(&a.checkpoint)?, selection: a.selection.resolve()?, engine, trace: a.trace })
}

fn baseline_run(a: &BaselineArgs) -> Result<BaselineRun> {
    let mp = MpConfig {
        deletion_mode: match a.deletion {
            Deletion::Min => DeletionMode::MinConst,
            Deletion::Blur => DeletionMode::Blur,
        },
        blur_sigma: a.sigma,
        sparsity_coeff: a.sparsity_coeff,
        tv_coeff: a.tv_coeff,
        tv_gamma: a.tv_gamma,
        lr: a.lr,
        iters: a.iters,
        convergence_tol: a.tol,
        threshold_scan_step: a.scan_step,
        class_index: a.class_index,
    };
    Ok(BaselineRun { checkpoint: absolute(&a.checkpoint)?, selection: a.selection.resolve()?, mp, seed: a.shared.seed })
}

/// Files a run reads, for the manifest.
fn inputs_of(run: &Run) -> Result<Vec<PathBuf>> {
    let selection_inputs = |checkpoint: &Path, sel: &Selection| -> Vec<PathBuf> {
        let mut v = vec![checkpoint.to_path_buf()];
        match &sel.data {
            Some(d) => v.push(d.join(dataset::INDEX_FILE)),
            None => v.extend(sel.images.iter().chain(&sel.gt).cloned()),
        }
        v
    };
    Ok(match run {
        Run::GenData(_) => Vec::new(),
        Run::Train(r) => vec![r.data.join(dataset::INDEX_FILE)],
        Run::Explain(r) => selection_inputs(&r.checkpoint, &r.selection),
        Run::Baseline(r) => selection_inputs(&r.checkpoint, &r.selection),
        Run::Evaluate(r) => r.metrics.clone(),
    })
}

/// Runs `run` into `out` on `jobs` threads and records its manifest.
pub fn execute_run(run: &Run, out: &Path, jobs: usize) -> Result<RunManifest> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    let outputs = pool.install(|| match run {
        Run::GenData(r) => commands::gen_data(r, out),
        Run::Train(r) => commands::train_cmd(r, out),
        Run::Explain(r) => commands::explain_cmd(r, out),
        Run::Baseline(r) => commands::baseline_cmd(r, out),
        Run::Evaluate(r) => commands::evaluate_cmd(r, Some(out)),
    })?;
    let manifest = RunManifest::new(run.clone(), inputs_of(run)?, outputs);
    manifest.write(out)?;
    Ok(manifest)
}

fn replay(a: &ReplayArgs) -> Result<()> {
    let (original, dir) = RunManifest::load(&a.manifest)?;
    let replayed = execute_run(&original.run, &a.out, a.jobs)?;
    if !a.verify {
        return Ok(());
    }
    let mut mismatches = Vec::new();
    for name in original.outputs.iter().chain(std::iter::once(&manifest::MANIFEST_FILE.to_string())) {
        let before = std::fs::read(dir.join(name)).with_context(|| format!("reading original {name}"))?;
        let after = std::fs::read(a.out.join(name)).with_context(|| format!("reading replayed {name}"))?;
        if before != after {
            mismatches.push(name.clone());
        }
    }
    if replayed.outputs != original.outputs {
        bail!("replay wrote a different set of files");
    }
    if !mismatches.is_empty() {
        bail!("{} file(s) differ after replay: {}", mismatches.len(), mismatches.join(", "));
    }
    println!("replay verified: {} files identical", original.outputs.len() + 1);
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            execute_run(&Run::GenData(gen_data_run(&a)?), &a.shared.out, a.shared.jobs)?;
        }
        Command::Train(a) => {
            let train = TrainConfig { epochs: a.epochs, lr: a.lr, batch_size: a.batch_size, seed: a.shared.seed };
            let run = TrainRun { data: absolute(&a.data)?, train_fraction: a.train_fraction, train };
            execute_run(&Run::Train(run), &a.shared.out, a.shared.jobs)?;
        }
        Command::Explain(a) => {
            execute_run(&Run::Explain(explain_run(&a)?), &a.shared.out, a.shared.jobs)?;
        }
        Command::Baseline(a) => {
            execute_run(&Run::Baseline(baseline_run(&a)?), &a.shared.out, a.shared.jobs)?;
        }
        Command::Evaluate(a) => {
            let metrics = a.metrics.iter().map(|p| absolute(p)).collect::<Result<_>>()?;
            let run = EvaluateRun { metrics };
            match &a.out {
                Some(out) => {
                    execute_run(&Run::Evaluate(run), out, 1)?;
                }
                None => {
                    commands::evaluate_cmd(&run, None)?;
                }
            }
        }
        Command::Replay(a) => replay(&a)?,
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_args<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    execute(Cli::try_parse_from(args)?)
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
