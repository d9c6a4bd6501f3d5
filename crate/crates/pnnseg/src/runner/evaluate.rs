//! Evaluation: slice, pad, forward, argmax, unpad, reassemble, and score
//! against the truth at the voxel level.

use super::checkpoint::{load_model, LoadedModel};
use super::config::ExperimentConfig;
use crate::autodiff::{Tape, Tensor};
use crate::ensemble::argmax_classes;
use crate::error::{Error, Result};
use crate::metrics::{confusion_counts, metrics_from_counts, Metrics};
use crate::volume::{
    cache, crop_slice, derive_seed, pad_slice_to_target, reassemble_mask, slice_volume,
    split_dataset, MaskVolume, Slice2D, Volume3D,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Padded slice edge length expected by the networks.
pub const SLICE_TARGET: usize = 64;

/// Per-volume, per-seed metric scores for both foreground labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeScores {
    pub volume_id: String,
    pub seed: u32,
    pub l1: Metrics,
    pub l2: Metrics,
}

impl VolumeScores {
    /// Score for a named metric and label set ("L1", "L2" or "L1+L2").
    pub fn value(&self, metric: &str, label_set: &str) -> Result<f64> {
        let pick = |m: &Metrics| -> Result<f64> {
            Ok(match metric {
                "dice" => m.dice,
                "jaccard" => m.jaccard,
                "sensitivity" => m.sensitivity,
                "specificity" => m.specificity,
                other => return Err(Error::Config(format!("unknown metric {other}"))),
            })
        };
        match label_set {
            "L1" => pick(&self.l1),
            "L2" => pick(&self.l2),
            "L1+L2" => Ok((pick(&self.l1)? + pick(&self.l2)?) / 2.0),
            other => Err(Error::Config(format!("unknown label set {other}"))),
        }
    }
}

/// Batch a set of padded slices into an (N, 1, S, S) tensor.
pub fn batch_from_slices(slices: &[Slice2D<f32>]) -> Result<Tensor> {
    let n = slices.len();
    if n == 0 {
        return Err(Error::Shape("cannot batch zero slices".into()));
    }
    let (rows, cols) = (slices[0].rows, slices[0].cols);
    let mut data = Vec::with_capacity(n * rows * cols);
    for s in slices {
        if (s.rows, s.cols) != (rows, cols) {
            return Err(Error::Shape("mixed slice sizes in one batch".into()));
        }
        data.extend(s.data.iter().map(|&v| v as f64));
    }
    Tensor::new(vec![n, 1, rows, cols], data)
}

/// Prediction function: probabilities (N, C, S, S) for a batch
/// (N, 1, S, S).
pub type PredictFn<'a> = dyn FnMut(&Tensor) -> Result<Tensor> + 'a;

/// Evaluate volumes against their truths: per volume, slice -> pad ->
/// predict -> argmax -> unpad -> reassemble -> per-label confusion.
pub fn evaluate_volumes(
    predict: &mut PredictFn,
    volumes: &[(Volume3D, MaskVolume)],
    batch_size: usize,
    seed: u32,
) -> Result<Vec<VolumeScores>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut out = Vec::with_capacity(volumes.len());
    for (vol, truth) in volumes {
        if vol.extents != truth.extents {
            return Err(Error::Format(format!(
                "volume {} extents {:?} do not match its truth mask {:?}",
                vol.id, vol.extents, truth.extents
            )));
        }
        let [_, y, z] = vol.extents;
        let slices = slice_volume(vol);
        let mut padded = Vec::with_capacity(slices.len());
        let mut offsets = (0, 0);
        for s in &slices {
            let (p, off) = pad_slice_to_target(s, SLICE_TARGET)?;
            offsets = off;
            padded.push(p);
        }
        let mut pred_slices: Vec<Slice2D<u8>> = Vec::with_capacity(padded.len());
        for chunk in padded.chunks(batch_size) {
            let batch = batch_from_slices(chunk)?;
            let probs = predict(&batch)?;
            let (bn, _, ph, pw) = probs.dims4()?;
            if bn != chunk.len() || ph != SLICE_TARGET || pw != SLICE_TARGET {
                return Err(Error::Shape(format!(
                    "prediction shape {:?} does not match batch of {}",
                    probs.shape(),
                    chunk.len()
                )));
            }
            let labels = argmax_classes(&probs)?;
            for i in 0..chunk.len() {
                let flat = Slice2D::new(
                    SLICE_TARGET,
                    SLICE_TARGET,
                    labels[i * SLICE_TARGET * SLICE_TARGET..(i + 1) * SLICE_TARGET * SLICE_TARGET]
                        .to_vec(),
                )?;
                pred_slices.push(crop_slice(&flat, offsets, y, z)?);
            }
        }
        let pred_mask = reassemble_mask(&pred_slices, vol.extents)?;
        out.push(VolumeScores {
            volume_id: vol.id.clone(),
            seed,
            l1: metrics_from_counts(&confusion_counts(&pred_mask, truth, 1)?),
            l2: metrics_from_counts(&confusion_counts(&pred_mask, truth, 2)?),
        });
    }
    Ok(out)
}

impl LoadedModel {
    /// Class probabilities for a batch, merged by soft voting where the
    /// model is an ensemble.
    pub fn predict_probs(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let probs = match self {
            LoadedModel::Unet(net) => {
                let (logits, _) = net.forward(&mut tape, x)?;
                tape.softmax_channels(logits)?
            }
            LoadedModel::Ensemble(ens) => ens.forward_vote(&mut tape, x)?.voted,
            LoadedModel::Pnn(net) => net.forward(&mut tape, x)?.voted,
        };
        Ok(tape.value(probs).clone())
    }
}

/// Evaluate one checkpoint on the test split its seed induces, writing
/// `eval-<model>-<phase>-s<k>.json` next to the checkpoint.
pub fn evaluate_model(cfg: &ExperimentConfig, experiment: u32) -> Result<Vec<VolumeScores>> {
    let seed = derive_seed(experiment)?;
    let stem = super::checkpoint::checkpoint_stem(cfg.model, cfg.phase, experiment);
    let (manifest, model) = load_model(&cfg.out_dir, &stem)?;
    if manifest.seed != seed {
        return Err(Error::Data(format!(
            "checkpoint {stem} was trained under seed {}, expected {seed}",
            manifest.seed
        )));
    }
    let data = cache::load_cache(&cfg.data_dir)?;
    let ids: Vec<String> = data.iter().map(|(v, _)| v.id.clone()).collect();
    let (_, _, test_ids) = split_dataset(&ids, seed as u64, (0.6, 0.2, 0.2))?;
    let test: Vec<(Volume3D, MaskVolume)> = data
        .into_iter()
        .filter(|(v, _)| test_ids.contains(&v.id))
        .collect();
    let mut predict = |batch: &Tensor| model.predict_probs(batch);
    let scores = evaluate_volumes(&mut predict, &test, cfg.batch_size, seed)?;
    write_scores(&scores_path(&cfg.out_dir, cfg, experiment), &scores)?;
    Ok(scores)
}

pub fn scores_path(dir: &Path, cfg: &ExperimentConfig, experiment: u32) -> PathBuf {
    dir.join(format!(
        "eval-{}-{}-s{}.json",
        cfg.model.tag(),
        cfg.phase.tag(),
        experiment
    ))
}

pub fn write_scores(path: &Path, scores: &[VolumeScores]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(scores)?)?;
    Ok(())
}

pub fn load_scores(path: &Path) -> Result<Vec<VolumeScores>> {
    if !path.exists() {
        return Err(Error::Dependency(format!("missing evaluation file {}", path.display())));
    }
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}
