//! Confusion accounting, overlap metrics, five-run aggregation, and the
//! paired t-test with an exact Student-t CDF.

mod special;
mod ttest;

pub use special::{ln_gamma, reg_inc_beta, student_t_cdf};
pub use ttest::{paired_t_test, significance_marker, TTestResult};

use crate::error::{Error, Result};
use crate::volume::MaskVolume;

/// Per-label, per-volume confusion counts. Always sums to the voxel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }
}

/// One-vs-rest confusion counts for a foreground label (1 or 2).
pub fn confusion_counts(pred: &MaskVolume, truth: &MaskVolume, label: u8) -> Result<ConfusionCounts> {
    if pred.extents != truth.extents {
        return Err(Error::Shape(format!(
            "prediction extents {:?} differ from truth {:?}",
            pred.extents, truth.extents
        )));
    }
    if !(label == 1 || label == 2) {
        return Err(Error::Label(format!("confusion label must be 1 or 2, got {label}")));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.labels.iter().zip(&truth.labels) {
        match (p == label, t == label) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    Ok(c)
}

/// Dice, Jaccard, sensitivity and specificity, each in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Metrics {
    pub dice: f64,
    pub jaccard: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Derive the four metrics from counts. Degenerate denominators resolve
/// to 1: a label that is absent and never predicted scores perfect
/// overlap, and an image with no negatives scores perfect specificity.
pub fn metrics_from_counts(c: &ConfusionCounts) -> Metrics {
    let tp = c.true_pos as f64;
    let fp = c.false_pos as f64;
    let tn = c.true_neg as f64;
    let fne = c.false_neg as f64;
    let ratio = |num: f64, den: f64| if den == 0.0 { 1.0 } else { num / den };
    Metrics {
        dice: ratio(2.0 * tp, 2.0 * tp + fp + fne),
        jaccard: ratio(tp, tp + fp + fne),
        sensitivity: ratio(tp, tp + fne),
        specificity: ratio(tn, tn + fp),
    }
}

/// Five-run mean row: per-label means plus their pooled column (the mean
/// of the two label columns).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateRow {
    pub l1_mean: f64,
    pub l2_mean: f64,
    pub pooled: f64,
}

impl AggregateRow {
    /// Pool two already-averaged label columns.
    pub fn from_column_means(l1_mean: f64, l2_mean: f64) -> Self {
        AggregateRow { l1_mean, l2_mean, pooled: (l1_mean + l2_mean) / 2.0 }
    }
}

/// Aggregate exactly five per-seed values per label.
pub fn aggregate_runs(l1: &[f64], l2: &[f64]) -> Result<AggregateRow> {
    if l1.len() != 5 || l2.len() != 5 {
        return Err(Error::Data(format!(
            "five-run aggregation needs 5 values per label, got {} and {}",
            l1.len(),
            l2.len()
        )));
    }
    Ok(AggregateRow::from_column_means(mean(l1), mean(l2)))
}

/// Compensated (Neumaier) mean.
pub fn mean(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    (sum + comp) / values.len() as f64
}
