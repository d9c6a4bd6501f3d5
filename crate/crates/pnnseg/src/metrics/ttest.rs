//! Paired two-sided t-test over per-volume, per-seed scores.

use super::special::student_t_cdf;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TTestResult {
    pub t: f64,
    pub df: u32,
    /// Two-sided p-value.
    pub p: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    pub n: usize,
}

/// Paired t-test: the one-sample statistic of the elementwise differences
/// against mean zero, with Bessel-corrected standard deviation.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::Config(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 pairs, got {n}")));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean_d = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean_d) * (d - mean_d)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let mean_a = a.iter().sum::<f64>() / n as f64;
    let mean_b = b.iter().sum::<f64>() / n as f64;
    let df = (n - 1) as u32;

    if sd == 0.0 {
        if mean_d == 0.0 {
            return Ok(TTestResult { t: 0.0, df, p: 1.0, mean_a, mean_b, n });
        }
        return Err(Error::DegenerateVariance);
    }
    let t = mean_d / (sd / (n as f64).sqrt());
    let p = 2.0 * (1.0 - student_t_cdf(t.abs(), df)?);
    Ok(TTestResult { t, df, p: p.clamp(0.0, 1.0), mean_a, mean_b, n })
}

/// Significance marker: `**` below 0.01, `*` below 0.05, empty otherwise.
pub fn significance_marker(p: f64) -> &'static str {
    if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples_give_t_zero_p_one() {
        let a = [0.8, 0.9, 0.7, 0.85];
        let r = paired_t_test(&a, &a).unwrap();
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p, 1.0);
        assert_eq!(r.df, 3);
    }

    #[test]
    fn hand_computed_statistic() {
        // Differences 1..=5: mean 3, Bessel variance 2.5,
        // t = 3 / (sqrt(2.5) / sqrt(5)) = 3 sqrt(2) = 4.2426...
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [0.0; 5];
        let r = paired_t_test(&a, &b).unwrap();
        assert!((r.t - 3.0 * 2.0f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.df, 4);
        assert!(r.p > 0.0 && r.p < 0.05);
    }

    #[test]
    fn swapping_sides_negates_t_keeps_p() {
        let a = [0.83, 0.91, 0.78, 0.88, 0.84];
        let b = [0.80, 0.89, 0.80, 0.84, 0.83];
        let ab = paired_t_test(&a, &b).unwrap();
        let ba = paired_t_test(&b, &a).unwrap();
        assert!((ab.t + ba.t).abs() < 1e-12);
        assert!((ab.p - ba.p).abs() < 1e-12);
    }

    #[test]
    fn constant_nonzero_difference_is_degenerate() {
        let a = [1.0, 2.0, 3.0];
        let b = [0.5, 1.5, 2.5];
        assert!(matches!(
            paired_t_test(&a, &b),
            Err(Error::DegenerateVariance)
        ));
    }

    #[test]
    fn too_few_pairs_is_config_error() {
        assert!(matches!(paired_t_test(&[1.0], &[2.0]), Err(Error::Config(_))));
        assert!(matches!(
            paired_t_test(&[1.0, 2.0], &[1.0]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn markers_follow_the_two_tier_convention() {
        assert_eq!(significance_marker(0.004), "**");
        assert_eq!(significance_marker(0.03), "*");
        assert_eq!(significance_marker(0.05), "");
        assert_eq!(significance_marker(0.7), "");
    }
}
