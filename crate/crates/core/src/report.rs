//! Per-image metric lines (JSON Lines), their aggregation, and the
//! comparison table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ApeBreakdown, CcReport};

/// One explained image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub id: String,
    /// `ours`, `mp-min` or `mp-blur`.
    pub method: String,
    /// Sparsity-side coefficient: α for ours, the L0-approximation weight for MP.
    pub sparsity_coeff: f64,
    pub tv_coeff: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tv_gamma: Option<f64>,
    #[serde(flatten)]
    pub breakdown: ApeBreakdown,
    #[serde(flatten, default, skip_serializing_if = "Option::is_none")]
    pub cc: Option<CcReport>,
}

/// Means over one metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub sparsity_coeff: f64,
    pub tv_coeff: f64,
    pub tv_gamma: Option<f64>,
    pub images: usize,
    pub mean_sparsity: f64,
    pub mean_smoothness: f64,
    pub mean_classification: f64,
    pub mean_total: f64,
    /// Images that carried a ground-truth mask.
    pub cc_images: usize,
    /// Mean of per-image hit rates (headline number).
    pub mean_hit_rate: Option<f64>,
    /// Total hits over total components across images.
    pub pooled_hit_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

impl MetricsLine {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

pub fn to_jsonl(lines: &[MetricsLine]) -> Result<String> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&l.to_json()?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses JSON Lines, skipping blank lines. `source` names the input in errors.
pub fn parse_jsonl(text: &str, source: &str) -> Result<Vec<MetricsLine>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str(line)
            .map_err(|e| Error::InvalidConfig(format!("{source}:{}: malformed metrics line: {e}", n + 1)))?;
        out.push(parsed);
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("{source} contains no metrics lines")));
    }
    Ok(out)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

pub fn aggregate(lines: &[MetricsLine]) -> Result<Aggregate> {
    let first = lines.first().ok_or_else(|| Error::Empty("no metrics lines to aggregate".into()))?;
    if let Some(other) = lines.iter().find(|l| {
        l.method != first.method
            || l.sparsity_coeff != first.sparsity_coeff
            || l.tv_coeff != first.tv_coeff
            || l.tv_gamma != first.tv_gamma
    }) {
        return Err(Error::InvalidConfig(format!(
            "mixed settings in one metrics set: {} vs {} ({})",
            first.method, other.method, other.id
        )));
    }
    let ccs: Vec<&CcReport> = lines.iter().filter_map(|l| l.cc.as_ref()).collect();
    let (mean_hit_rate, pooled_hit_rate) = if ccs.is_empty() {
        (None, None)
    } else {
        let comps: usize = ccs.iter().map(|c| c.component_count).sum();
        let hits: usize = ccs.iter().map(|c| c.hit_count).sum();
        let pooled = if comps == 0 { 0.0 } else { hits as f64 / comps as f64 };
        (Some(mean(ccs.iter().map(|c| c.hit_rate))), Some(pooled))
    };
    Ok(Aggregate {
        method: first.method.clone(),
        sparsity_coeff: first.sparsity_coeff,
        tv_coeff: first.tv_coeff,
        tv_gamma: first.tv_gamma,
        images: lines.len(),
        mean_sparsity: mean(lines.iter().map(|l| l.breakdown.sparsity)),
        mean_smoothness: mean(lines.iter().map(|l| l.breakdown.smoothness)),
        mean_classification: mean(lines.iter().map(|l| l.breakdown.classification)),
        mean_total: mean(lines.iter().map(|l| l.breakdown.total)),
        cc_images: ccs.len(),
        mean_hit_rate,
        pooled_hit_rate,
        threshold: None,
    })
}

/// Aligned text table, one row per aggregate, columns as in the usual
/// method comparison: setting, then APE_D terms, then CC hit rate.
pub fn format_table(rows: &[Aggregate]) -> String {
    let header = ["Method", "L0 approx. coeff", "tv coeff", "tv_gamma", "L0", "tv", "classification", "APE_D", "CCs hit rate (%)"];
    let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in rows {
        cells.push(vec![
            r.method.clone(),
            format!("{}", r.sparsity_coeff),
            format!("{}", r.tv_coeff),
            r.tv_gamma.map_or("-".to_string(), |g| format!("{g}")),
            format!("{:.4}", r.mean_sparsity),
            format!("{:.4}", r.mean_smoothness),
            format!("{:.4}", r.mean_classification),
            format!("{:.4}", r.mean_total),
            r.mean_hit_rate.map_or("-".to_string(), |h| format!("{:.1}", 100.0 * h)),
        ]);
    }
    let widths: Vec<usize> = (0..header.len()).map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, row) in cells.iter().enumerate() {
        let line: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        out.push_str(line.join(" | ").trim_end());
        out.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&rule.join("-+-"));
            out.push('\n');
        }
    }
    out
}
