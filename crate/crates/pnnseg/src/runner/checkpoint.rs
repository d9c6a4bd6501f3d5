//! Checkpoints: a JSON manifest describing the architecture and parameter
//! layout, plus a little-endian 32-bit float weight blob.

use super::config::{ModelKind, Phase};
use crate::autodiff::Tensor;
use crate::ensemble::{EnsembleUNet, PnnConfig, PnnUNet};
use crate::error::{Error, Result};
use crate::nets::{ParameterStore, UNet, UNetConfig};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

/// Architecture description embedded in the manifest so evaluation can
/// rebuild the exact network.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ArchSpec {
    Unet { cfg: UNetConfig },
    Ensemble { deep: UNetConfig, wide: UNetConfig },
    Pnn { cfg: PnnConfig },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model: String,
    pub phase: String,
    pub experiment: u32,
    pub seed: u32,
    /// Epoch whose weights this checkpoint holds.
    pub epoch: usize,
    /// Validation mean Dice of that epoch, when a validation split existed.
    pub val_dice: Option<f64>,
    pub arch: ArchSpec,
    pub blob: String,
    pub blob_len: u64,
    pub params: Vec<ParamEntry>,
}

/// `deep-noaug-s1`-style checkpoint base name.
pub fn checkpoint_stem(model: ModelKind, phase: Phase, experiment: u32) -> String {
    format!("{}-{}-s{}", model.tag(), phase.tag(), experiment)
}

pub fn manifest_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.json"))
}

pub fn blob_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.bin"))
}

/// Serialize the given stores (in order, names prefixed) into a manifest
/// and weight blob. Weights are written as f32; quantize the stores first
/// if in-memory values must keep matching the file exactly.
#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint(
    dir: &Path,
    model: ModelKind,
    phase: Phase,
    experiment: u32,
    seed: u32,
    epoch: usize,
    val_dice: Option<f64>,
    arch: ArchSpec,
    stores: &[(&str, &ParameterStore)],
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let stem = checkpoint_stem(model, phase, experiment);
    let mut blob: Vec<u8> = Vec::new();
    let mut params = Vec::new();
    for (prefix, store) in stores {
        for (name, tensor) in store.iter() {
            let full = if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}.{name}")
            };
            params.push(ParamEntry {
                name: full,
                shape: tensor.shape().to_vec(),
                offset: blob.len() as u64,
            });
            for &v in tensor.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    let manifest = CheckpointManifest {
        model: model.tag().to_string(),
        phase: phase.tag().to_string(),
        experiment,
        seed,
        epoch,
        val_dice,
        arch,
        blob: format!("{stem}.bin"),
        blob_len: blob.len() as u64,
        params,
    };
    fs::write(blob_path(dir, &stem), &blob)?;
    fs::write(manifest_path(dir, &stem), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest_path(dir, &stem))
}

/// Read a manifest plus its blob back into named tensors, in manifest
/// order.
pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<(CheckpointManifest, Vec<(String, Tensor)>)> {
    let mpath = manifest_path(dir, stem);
    if !mpath.exists() {
        return Err(Error::Dependency(format!("checkpoint {} not found", mpath.display())));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(&mpath)?)?;
    let blob = fs::read(dir.join(&manifest.blob))?;
    if blob.len() as u64 != manifest.blob_len {
        return Err(Error::Format(format!(
            "blob length {} does not match manifest ({})",
            blob.len(),
            manifest.blob_len
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + count * 4;
        if end > blob.len() {
            return Err(Error::Format(format!("parameter {} overruns the blob", entry.name)));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    Ok((manifest, tensors))
}

/// A checkpointed model rebuilt for inference or stacking.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    Unet(UNet),
    Ensemble(EnsembleUNet),
    Pnn(PnnUNet),
}

/// Rebuild the architecture in a manifest from its stored weights.
pub fn load_model(dir: &Path, stem: &str) -> Result<(CheckpointManifest, LoadedModel)> {
    let (manifest, tensors) = load_checkpoint(dir, stem)?;
    let model = match &manifest.arch {
        ArchSpec::Unet { cfg } => {
            let mut store = ParameterStore::new();
            for (name, t) in tensors {
                store.insert(name, t)?;
            }
            LoadedModel::Unet(UNet { cfg: *cfg, params: store })
        }
        ArchSpec::Ensemble { deep, wide } => {
            let (d, w) = split_prefixed(tensors, &["deep", "wide"])?;
            LoadedModel::Ensemble(EnsembleUNet::from_members(
                UNet { cfg: *deep, params: d },
                UNet { cfg: *wide, params: w },
            )?)
        }
        ArchSpec::Pnn { cfg } => {
            let mut ae = ParameterStore::new();
            let mut deep = ParameterStore::new();
            let mut wide = ParameterStore::new();
            let mut vote = ParameterStore::new();
            for (name, t) in tensors {
                let (prefix, rest) = name
                    .split_once('.')
                    .ok_or_else(|| Error::Format(format!("unprefixed parameter {name}")))?;
                match prefix {
                    "ae" => ae.insert(rest, t)?,
                    "deep" => deep.insert(rest, t)?,
                    "wide" => wide.insert(rest, t)?,
                    "vote" => vote.insert(rest, t)?,
                    other => {
                        return Err(Error::Format(format!("unknown parameter prefix {other}")))
                    }
                }
            }
            LoadedModel::Pnn(PnnUNet {
                cfg: cfg.clone(),
                ae: crate::nets::DenseAutoencoder { cfg: cfg.ae.clone(), params: ae },
                deep: UNet { cfg: cfg.deep, params: deep },
                wide: UNet { cfg: cfg.wide, params: wide },
                seg_head: if vote.is_empty() { None } else { Some(vote) },
            })
        }
    };
    Ok((manifest, model))
}

fn split_prefixed(
    tensors: Vec<(String, Tensor)>,
    prefixes: &[&str; 2],
) -> Result<(ParameterStore, ParameterStore)> {
    let mut a = ParameterStore::new();
    let mut b = ParameterStore::new();
    for (name, t) in tensors {
        let (prefix, rest) = name
            .split_once('.')
            .ok_or_else(|| Error::Format(format!("unprefixed parameter {name}")))?;
        if prefix == prefixes[0] {
            a.insert(rest, t)?;
        } else if prefix == prefixes[1] {
            b.insert(rest, t)?;
        } else {
            return Err(Error::Format(format!("unknown parameter prefix {prefix}")));
        }
    }
    Ok((a, b))
}

/// FNV-1a digest of a file, for cheap tamper checks on member
/// checkpoints.
pub fn file_digest(path: &Path) -> Result<u64> {
    let bytes = fs::read(path)?;
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x1_0000_0000_01b3);
    }
    Ok(hash)
}
