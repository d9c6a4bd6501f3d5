//! Pairwise model comparison: paired t-tests per metric and label set
//! over (volume, seed)-keyed scores.

use super::evaluate::VolumeScores;
use crate::error::{Error, Result};
use crate::metrics::{mean, paired_t_test, significance_marker};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const METRICS: [&str; 4] = ["dice", "jaccard", "sensitivity", "specificity"];
pub const LABEL_SETS: [&str; 3] = ["L1+L2", "L1", "L2"];

/// One comparison cell: a metric and label set with its test outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub label_set: String,
    pub t: f64,
    pub p: f64,
    /// `**` under 0.01, `*` under 0.05, empty otherwise.
    pub marker: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub pairs: usize,
}

/// Compare two models' scores, pairing by (volume id, seed). Both sides
/// must cover exactly the same pairs.
pub fn compare_models(a: &[VolumeScores], b: &[VolumeScores]) -> Result<Vec<ComparisonRow>> {
    let index = |scores: &[VolumeScores]| -> Result<BTreeMap<(String, u32), VolumeScores>> {
        let mut map = BTreeMap::new();
        for s in scores {
            if map.insert((s.volume_id.clone(), s.seed), s.clone()).is_some() {
                return Err(Error::Data(format!(
                    "duplicate scores for volume {} seed {}",
                    s.volume_id, s.seed
                )));
            }
        }
        Ok(map)
    };
    let ia = index(a)?;
    let ib = index(b)?;
    if ia.len() != ib.len() || !ia.keys().all(|k| ib.contains_key(k)) {
        return Err(Error::Data(
            "comparison sides cover different (volume, seed) pairs".into(),
        ));
    }
    if ia.is_empty() {
        return Err(Error::Data("nothing to compare".into()));
    }

    let mut rows = Vec::with_capacity(METRICS.len() * LABEL_SETS.len());
    for metric in METRICS {
        for label_set in LABEL_SETS {
            let mut xs = Vec::with_capacity(ia.len());
            let mut ys = Vec::with_capacity(ia.len());
            for (key, sa) in &ia {
                xs.push(sa.value(metric, label_set)?);
                ys.push(ib[key].value(metric, label_set)?);
            }
            let r = paired_t_test(&xs, &ys)?;
            rows.push(ComparisonRow {
                metric: metric.to_string(),
                label_set: label_set.to_string(),
                t: r.t,
                p: r.p,
                marker: significance_marker(r.p).to_string(),
                mean_a: mean(&xs),
                mean_b: mean(&ys),
                pairs: xs.len(),
            });
        }
    }
    Ok(rows)
}
