//! Report emission: five-run tables and comparison tables, as CSV and
//! markdown, reals printed with 6 decimals.

use super::compare::{ComparisonRow, LABEL_SETS, METRICS};
use super::evaluate::VolumeScores;
use crate::error::{Error, Result};
use crate::metrics::mean;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// One five-run row: a (model, label set, metric) cell with its per-seed
/// values and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub label: String,
    pub metric: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

/// Build five-run rows for one model from its per-seed scores (exactly
/// five seeds; each seed's cell is the mean over its test volumes).
pub fn five_run_rows(
    model: &str,
    by_seed: &BTreeMap<u32, Vec<VolumeScores>>,
) -> Result<Vec<ReportRow>> {
    if by_seed.len() != 5 {
        return Err(Error::Data(format!(
            "five-run report needs 5 seeds for {model}, got {}",
            by_seed.len()
        )));
    }
    let mut rows = Vec::new();
    for metric in METRICS {
        for label in LABEL_SETS {
            let mut per_seed = Vec::with_capacity(5);
            for scores in by_seed.values() {
                if scores.is_empty() {
                    return Err(Error::Data(format!("empty score set for {model}")));
                }
                let vals: Vec<f64> = scores
                    .iter()
                    .map(|s| s.value(metric, label))
                    .collect::<Result<_>>()?;
                per_seed.push(mean(&vals));
            }
            rows.push(ReportRow {
                model: model.to_string(),
                label: label.to_string(),
                metric: metric.to_string(),
                mean: mean(&per_seed),
                per_seed,
            });
        }
    }
    Ok(rows)
}

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

/// CSV with one row per (model, label, metric) cell.
pub fn five_run_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("model,label,metric,s1,s2,s3,s4,s5,mean\n");
    for r in rows {
        let seeds: Vec<String> = r.per_seed.iter().map(|&v| fmt6(v)).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.model,
            r.label,
            r.metric,
            seeds.join(","),
            fmt6(r.mean)
        );
    }
    out
}

/// Markdown: one table per metric, a row per model, the three label
/// columns.
pub fn five_run_markdown(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    for metric in METRICS {
        let subset: Vec<&ReportRow> = rows.iter().filter(|r| r.metric == metric).collect();
        if subset.is_empty() {
            continue;
        }
        let _ = writeln!(out, "### Five-run average of {metric}\n");
        let _ = writeln!(out, "| Models | L1 Mean | L2 Mean | L1 & L2 Mean |");
        let _ = writeln!(out, "|---|---|---|---|");
        let mut models: Vec<&str> = Vec::new();
        for r in &subset {
            if !models.contains(&r.model.as_str()) {
                models.push(&r.model);
            }
        }
        for model in models {
            let cell = |label: &str| -> String {
                subset
                    .iter()
                    .find(|r| r.model == model && r.label == label)
                    .map(|r| fmt6(r.mean))
                    .unwrap_or_else(|| "-".into())
            };
            let _ = writeln!(
                out,
                "| {model} | {} | {} | {} |",
                cell("L1"),
                cell("L2"),
                cell("L1+L2")
            );
        }
        out.push('\n');
    }
    out
}

/// CSV for a model-pair comparison.
pub fn comparison_csv(pair: &str, rows: &[ComparisonRow]) -> String {
    let mut out = String::from("comparison,metric,label,t,p,marker\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{pair},{},{},{},{},{}",
            r.metric,
            r.label_set,
            fmt6(r.t),
            fmt6(r.p),
            r.marker
        );
    }
    out
}

/// Markdown: one comparison table per metric with the paper's three
/// label-set columns, p-values starred at the 0.05 / 0.01 tiers.
pub fn comparison_markdown(pairs: &[(String, Vec<ComparisonRow>)]) -> String {
    let mut out = String::new();
    for metric in METRICS {
        let _ = writeln!(out, "### T-test of {metric} (p-value)\n");
        let _ = writeln!(out, "| Comparison | L1+L2 | L1 | L2 |");
        let _ = writeln!(out, "|---|---|---|---|");
        for (name, rows) in pairs {
            let cell = |label: &str| -> String {
                rows.iter()
                    .find(|r| r.metric == metric && r.label_set == label)
                    .map(|r| {
                        let star = if r.marker.is_empty() { String::new() } else { format!(" {}", r.marker) };
                        format!("{:.4}{star}", r.p)
                    })
                    .unwrap_or_else(|| "-".into())
            };
            let _ = writeln!(out, "| {name} | {} | {} | {} |", cell("L1+L2"), cell("L1"), cell("L2"));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(Error::Config(format!("unknown report format {other}"))),
        }
    }

    pub fn extension(&self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
        }
    }
}

/// Write a report file; returns its path.
pub fn write_report(dir: &Path, basename: &str, format: ReportFormat, content: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{basename}.{}", format.extension()));
    std::fs::write(&path, content)?;
    Ok(path)
}
