//! Command bodies. Each returns the output paths it wrote, relative to its
//! output directory; the caller records them in the manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{load_index, load_samples, read_pgm, sample_id, DatasetIndex, IndexEntry, Item, INDEX_FILE};
use super::manifest::{BaselineRun, EvaluateRun, ExplainRun, GenDataRun, TrainRun};
use crate::baseline::{mp_optimize, threshold_and_score};
use crate::engine::explain;
use crate::field::Field2D;
use crate::io::write_atomic;
use crate::metrics::cc_hit_rate;
use crate::model::{mean_loss, roc_auc, train, Checkpoint, Classifier, ClassifierParams};
use crate::pgm;
use crate::report::{aggregate, format_table, parse_jsonl, to_jsonl, Aggregate, MetricsLine};
use crate::toydata::{generate, split};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const AGGREGATE_FILE: &str = "aggregate.json";
pub const TABLE_FILE: &str = "table.txt";
pub const COMPARISON_FILE: &str = "comparison.json";

fn write_json<T: Serialize>(out: &Path, name: &str, value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(&out.join(name), text.as_bytes())?;
    Ok(name.to_string())
}

fn write_pgm(out: &Path, name: String, field: &Field2D) -> Result<String> {
    pgm::write(&out.join(&name), field).with_context(|| format!("writing {name}"))?;
    Ok(name)
}

pub fn gen_data(run: &GenDataRun, out: &Path) -> Result<Vec<String>> {
    let samples = generate(&run.toy)?;
    let written: Vec<(IndexEntry, [String; 2])> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let id = sample_id(i);
            let image = write_pgm(out, format!("images/{id}.pgm"), &s.image)?;
            let mask = write_pgm(out, format!("masks/{id}.pgm"), &s.gt_mask)?;
            Ok((IndexEntry { id, label: s.label, image: image.clone(), mask: mask.clone() }, [image, mask]))
        })
        .collect::<Result<_>>()?;
    let mut outputs = Vec::with_capacity(2 * written.len() + 1);
    let mut entries = Vec::with_capacity(written.len());
    for (entry, files) in written {
        entries.push(entry);
        outputs.extend(files);
    }
    let positives = entries.iter().filter(|e| e.label == 1).count();
    outputs.push(write_json(out, INDEX_FILE, &DatasetIndex { config: run.toy.clone(), samples: entries })?);
    println!("generated {} samples ({positives} positive) in {}", run.toy.count, out.display());
    Ok(outputs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub train_samples: usize,
    pub validation_samples: usize,
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub validation_loss: f64,
    pub validation_auc: f64,
}

pub fn train_cmd(run: &TrainRun, out: &Path) -> Result<Vec<String>> {
    let index = load_index(&run.data)?;
    let samples = load_samples(&run.data, &index)?;
    let (tr, va) = split(&samples, run.train_fraction, run.train.seed)?;
    let (params, report) = train(&tr, &run.train)?;
    let log = TrainLog {
        train_samples: tr.len(),
        validation_samples: va.len(),
        initial_loss: report.initial_loss,
        epoch_losses: report.epoch_losses,
        validation_loss: mean_loss(&params, &va)?,
        validation_auc: roc_auc(&params, &va)?,
    };
    let ck = Checkpoint::from_params(&params, run.train.seed, run.train.epochs);
    let mut text = ck.to_json()?;
    text.push('\n');
    write_atomic(&out.join(CHECKPOINT_FILE), text.as_bytes())?;
    let outputs = vec![CHECKPOINT_FILE.to_string(), write_json(out, TRAIN_LOG_FILE, &log)?];
    println!(
        "trained {} params on {} samples: validation loss {:.4}, ROC-AUC {:.4}",
        params.num_params(),
        log.train_samples,
        log.validation_loss,
        log.validation_auc
    );
    Ok(outputs)
}

pub fn load_model(path: &Path) -> Result<ClassifierParams> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(ck.to_params()?)
}

struct Loaded {
    item: Item,
    image: Field2D,
    gt: Option<Field2D>,
}

fn load_item(model: &impl Classifier, item: &Item) -> Result<Loaded> {
    let image = read_pgm(&item.image_path)?;
    model.check_input(&image).with_context(|| format!("{} does not fit the model", item.image_path.display()))?;
    let gt = match &item.gt_path {
        Some(p) => {
            let gt = read_pgm(p)?;
            image.check_shape(&gt).with_context(|| format!("ground truth {}", p.display()))?;
            gt.check_binary().with_context(|| format!("ground truth {}", p.display()))?;
            Some(gt)
        }
        None => None,
    };
    Ok(Loaded { item: item.clone(), image, gt })
}

/// Writes the metrics lines and their aggregate (the single reducer step).
fn reduce(out: &Path, lines: &[MetricsLine], threshold: Option<f64>) -> Result<(Aggregate, Vec<String>)> {
    write_atomic(&out.join(METRICS_FILE), to_jsonl(lines)?.as_bytes())?;
    let mut agg = aggregate(lines)?;
    agg.threshold = threshold;
    let name = write_json(out, AGGREGATE_FILE, &agg)?;
    Ok((agg, vec![METRICS_FILE.to_string(), name]))
}

fn summarize(agg: &Aggregate) {
    let hit = agg.mean_hit_rate.map_or("-".to_string(), |h| format!("{:.3}", h));
    println!(
        "{} ({}, {}) on {} images: L0 {:.4}  tv {:.4}  classification {:.4}  APE_D {:.4}  CC hit rate {hit}",
        agg.method,
        agg.sparsity_coeff,
        agg.tv_coeff,
        agg.images,
        agg.mean_sparsity,
        agg.mean_smoothness,
        agg.mean_classification,
        agg.mean_total
    );
}

pub fn explain_cmd(run: &ExplainRun, out: &Path) -> Result<Vec<String>> {
    run.engine.validate()?;
    let model = load_model(&run.checkpoint)?;
    let items = run.selection.resolve(run.engine.seed)?;
    let per_image: Vec<(MetricsLine, Vec<String>)> = items
        .par_iter()
        .map(|item| {
            let l = load_item(&model, item)?;
            let id = &l.item.id;
            let ex = explain(&model, &l.image, &run.engine).with_context(|| format!("explaining {id}"))?;
            let mut files = vec![
                write_pgm(out, format!("masks/{id}.pgm"), &ex.mask)?,
                write_pgm(out, format!("perturbed/{id}.pgm"), &ex.perturbed_phase2)?,
            ];
            if run.trace {
                let mut csv = String::from("iteration,loss\n");
                for (i, v) in ex.phase1_loss_trace.iter().enumerate() {
                    writeln!(csv, "{i},{v:?}").unwrap();
                }
                let name = format!("traces/{id}.csv");
                write_atomic(&out.join(&name), csv.as_bytes())?;
                files.push(name);
            }
            let cc = l.gt.as_ref().map(|gt| cc_hit_rate(&ex.mask, gt)).transpose()?;
            let line = MetricsLine {
                id: id.clone(),
                method: "ours".into(),
                sparsity_coeff: run.engine.alpha,
                tv_coeff: run.engine.beta,
                tv_gamma: None,
                breakdown: ex.breakdown,
                cc,
            };
            Ok((line, files))
        })
        .collect::<Result<_>>()?;
    let (lines, files): (Vec<_>, Vec<Vec<String>>) = per_image.into_iter().unzip();
    let mut outputs: Vec<String> = files.into_iter().flatten().collect();
    let (agg, files) = reduce(out, &lines, None)?;
    outputs.extend(files);
    summarize(&agg);
    Ok(outputs)
}

pub fn baseline_cmd(run: &BaselineRun, out: &Path) -> Result<Vec<String>> {
    run.mp.validate()?;
    let model = load_model(&run.checkpoint)?;
    let items = run.selection.resolve(run.seed)?;
    let loaded: Vec<(Loaded, Field2D)> = items
        .par_iter()
        .map(|item| {
            let l = load_item(&model, item)?;
            let soft = mp_optimize(&model, &l.image, &run.mp).with_context(|| format!("optimizing {}", l.item.id))?;
            Ok((l, soft))
        })
        .collect::<Result<_>>()?;
    let images: Vec<Field2D> = loaded.iter().map(|(l, _)| l.image.clone()).collect();
    let softs: Vec<Field2D> = loaded.iter().map(|(_, s)| s.clone()).collect();
    let (t_best, results) = threshold_and_score(&model, &images, &softs, &run.mp)?;
    let method = run.mp.deletion_mode.method_name();
    let per_image: Vec<(MetricsLine, Vec<String>)> = loaded
        .par_iter()
        .zip(results.par_iter())
        .map(|((l, _), r)| {
            let id = &l.item.id;
            let files = vec![
                write_pgm(out, format!("masks/{id}.pgm"), &r.binary_mask)?,
                write_pgm(out, format!("soft/{id}.pgm"), &r.soft_mask)?,
                write_pgm(out, format!("perturbed/{id}.pgm"), &r.perturbed)?,
            ];
            let cc = l.gt.as_ref().map(|gt| cc_hit_rate(&r.binary_mask, gt)).transpose()?;
            let line = MetricsLine {
                id: id.clone(),
                method: method.into(),
                sparsity_coeff: run.mp.sparsity_coeff,
                tv_coeff: run.mp.tv_coeff,
                tv_gamma: Some(run.mp.tv_gamma),
                breakdown: r.breakdown,
                cc,
            };
            Ok((line, files))
        })
        .collect::<Result<_>>()?;
    let (lines, files): (Vec<_>, Vec<Vec<String>>) = per_image.into_iter().unzip();
    let mut outputs: Vec<String> = files.into_iter().flatten().collect();
    let (agg, files) = reduce(out, &lines, Some(t_best))?;
    outputs.extend(files);
    summarize(&agg);
    println!("threshold T = {t_best}");
    Ok(outputs)
}

/// Aggregates one row per metrics file. Without an output directory only
/// the table is printed.
pub fn evaluate_cmd(run: &EvaluateRun, out: Option<&Path>) -> Result<Vec<String>> {
    if run.metrics.is_empty() {
        bail!("evaluate needs at least one metrics file");
    }
    let rows: Vec<Aggregate> = run
        .metrics
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let mut agg = aggregate(&parse_jsonl(&text, &p.display().to_string())?)?;
            agg.threshold = sibling_threshold(p);
            Ok(agg)
        })
        .collect::<Result<_>>()?;
    let table = format_table(&rows);
    print!("{table}");
    let Some(out) = out else { return Ok(Vec::new()) };
    write_atomic(&out.join(TABLE_FILE), table.as_bytes())?;
    Ok(vec![TABLE_FILE.to_string(), write_json(out, COMPARISON_FILE, &rows)?])
}

/// The baseline's chosen threshold lives in the aggregate next to its
/// metrics file; it is carried through when present.
fn sibling_threshold(metrics: &Path) -> Option<f64> {
    let path: PathBuf = metrics.parent()?.join(AGGREGATE_FILE);
    let agg: Aggregate = serde_json::from_str(&std::fs::read_to_string(path).ok()?).ok()?;
    agg.threshold
}
