//! Experiment seeds and the deterministic train/val/test split.

use super::rng::Rng;
use crate::error::{Error, Result};

/// Seed for experiment number `k`: the 32-bit seed range divided into 60
/// intervals, times the experiment number, in exact integer arithmetic:
/// `floor(2^32 * k / 60)`.
pub fn derive_seed(k: u32) -> Result<u32> {
    if !(1..=59).contains(&k) {
        return Err(Error::Config(format!(
            "experiment number must be in 1..=59, got {k}"
        )));
    }
    Ok(((1u64 << 32) * k as u64 / 60) as u32)
}

/// Split ratios and the integer sizes they produce on a given dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub ratios: (f64, f64, f64),
    pub counts: (usize, usize, usize),
}

impl SplitSpec {
    /// Train and validation take `floor(ratio * n)` items (with a small
    /// slack so exact decimal ratios are not lost to binary rounding);
    /// test takes the remainder.
    pub fn for_size(n: usize, ratios: (f64, f64, f64)) -> Result<Self> {
        let (tr, va, te) = ratios;
        if (tr + va + te - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios must sum to 1, got {:?}",
                ratios
            )));
        }
        if tr < 0.0 || va < 0.0 || te < 0.0 {
            return Err(Error::Config("split ratios must be nonnegative".into()));
        }
        let train = ((tr * n as f64) + 1e-9).floor() as usize;
        let val = ((va * n as f64) + 1e-9).floor() as usize;
        if train + val > n {
            return Err(Error::Config("split ratios overflow the dataset".into()));
        }
        Ok(SplitSpec {
            ratios,
            counts: (train, val, n - train - val),
        })
    }
}

/// Deterministic split: sort ids, Fisher-Yates shuffle with `Rng(seed)`,
/// then partition by the spec's counts. Disjoint and covering by
/// construction.
pub fn split_dataset(
    ids: &[String],
    seed: u64,
    ratios: (f64, f64, f64),
) -> Result<(Vec<String>, Vec<String>, Vec<String>)> {
    if ids.is_empty() {
        return Err(Error::Config("cannot split an empty dataset".into()));
    }
    let spec = SplitSpec::for_size(ids.len(), ratios)?;
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    let mut rng = Rng::new(seed);
    rng.shuffle(&mut sorted);
    let (train, val, _) = spec.counts;
    let rest = sorted.split_off(train);
    let (val_ids, test_ids) = {
        let mut rest = rest;
        let test = rest.split_off(val);
        (rest, test)
    };
    Ok((sorted, val_ids, test_ids))
}
