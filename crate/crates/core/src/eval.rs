//! AUROC, R-score density series and result tables.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::scoring::ScoreMode;
use crate::{AmaError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AurocResult {
    pub value: f64,
    pub n_normal: usize,
    pub n_anomaly: usize,
    pub score_mode: Option<ScoreMode>,
    pub experiment: String,
}

/// Probability that a random anomaly outscores a random normal, ties
/// counting one half. Computed from average ranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(AmaError::contract(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(AmaError::contract(format!("non-finite score {bad}")));
    }
    let n_anom = labels.iter().filter(|&&l| l).count();
    let n_norm = labels.len() - n_anom;
    if n_anom == 0 || n_norm == 0 {
        return Err(AmaError::config_general(format!(
            "AUROC needs both classes, got {n_norm} normal and {n_anom} anomalous samples"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of the anomalies keeps tie ranks integral
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let rank2 = (i + 1 + j) as u128;
        let anomalies = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        rank2_sum += rank2 * anomalies;
        i = j;
    }
    let (na, nn) = (n_anom as u128, n_norm as u128);
    let u2 = rank2_sum - na * (na + 1);
    Ok(u2 as f64 / (2 * na * nn) as f64)
}

pub fn auroc_result(scores: &[f64], labels: &[bool], mode: Option<ScoreMode>, experiment: &str) -> Result<AurocResult> {
    let n_anomaly = labels.iter().filter(|&&l| l).count();
    Ok(AurocResult {
        value: auroc(scores, labels)?,
        n_normal: labels.len() - n_anomaly,
        n_anomaly,
        score_mode: mode,
        experiment: experiment.to_string(),
    })
}

/// Normalized histogram of one score population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensitySeries {
    pub tag: String,
    /// `bins + 1` ascending edges.
    pub edges: Vec<f64>,
    pub masses: Vec<f64>,
}

/// Histograms over one bin grid spanning the pooled range of every
/// nonempty series. Empty series are dropped with a warning.
pub fn density_series(series: &[(&str, &[f64])], bins: usize) -> Result<Vec<DensitySeries>> {
    if bins == 0 {
        return Err(AmaError::config("bins", "must be at least 1"));
    }
    let kept: Vec<_> = series
        .iter()
        .filter(|(tag, s)| {
            if s.is_empty() {
                log::warn!("skipping empty score series `{tag}`");
            }
            !s.is_empty()
        })
        .collect();
    let pooled = kept.iter().flat_map(|(_, s)| s.iter().copied());
    let (lo, hi) = pooled.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if kept.iter().any(|(_, s)| s.iter().any(|v| !v.is_finite())) {
        return Err(AmaError::contract("density series contain non-finite scores"));
    }
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
    Ok(kept
        .into_iter()
        .map(|(tag, s)| {
            let mut counts = vec![0usize; bins];
            for &v in s.iter() {
                let b = (((v - lo) / width) as usize).min(bins - 1);
                counts[b] += 1;
            }
            let n = s.len() as f64;
            DensitySeries {
                tag: tag.to_string(),
                edges: edges.clone(),
                masses: counts.into_iter().map(|c| c as f64 / n).collect(),
            }
        })
        .collect())
}

/// Long-format CSV: `tag,bin_lo,bin_hi,mass`.
pub fn density_csv(series: &[DensitySeries]) -> String {
    let mut out = String::from("tag,bin_lo,bin_hi,mass\n");
    for s in series {
        for (i, m) in s.masses.iter().enumerate() {
            let _ = writeln!(out, "{},{:e},{:e},{:e}", s.tag, s.edges[i], s.edges[i + 1], m);
        }
    }
    out
}

/// Rows keyed by method, columns keyed by dataset or variant.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl ResultTable {
    pub fn new(title: &str, columns: &[&str]) -> Self {
        Self {
            title: title.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, values: Vec<Option<f64>>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(AmaError::contract(format!(
                "row `{name}` has {} values for {} columns",
                values.len(),
                self.columns.len()
            )));
        }
        self.rows.push((name.to_string(), values));
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("method,{}\n", self.columns.join(","));
        for (name, vals) in &self.rows {
            let cells: Vec<String> = vals.iter().map(|v| v.map(|v| format!("{v:.4}")).unwrap_or_default()).collect();
            let _ = writeln!(out, "{name},{}", cells.join(","));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        if !self.title.is_empty() {
            let _ = writeln!(out, "**{}**\n", self.title);
        }
        let _ = writeln!(out, "| Method | {} |", self.columns.join(" | "));
        let _ = writeln!(out, "|---|{}", "---|".repeat(self.columns.len()));
        for (name, vals) in &self.rows {
            let cells: Vec<String> = vals
                .iter()
                .map(|v| v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()))
                .collect();
            let _ = writeln!(out, "| {name} | {} |", cells.join(" | "));
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.md` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| AmaError::io(dir, e))?;
        for (ext, body) in [("csv", self.to_csv()), ("md", self.to_markdown())] {
            let path = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&path, body).map_err(|e| AmaError::io(&path, e))?;
        }
        Ok(())
    }
}
