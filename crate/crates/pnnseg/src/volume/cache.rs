//! On-disk volume cache: a JSON manifest plus one little-endian raw blob.
//!
//! `manifest.json` lists ids, extents and byte offsets; `volumes.bin`
//! holds each volume's normalized image voxels (f32, little-endian)
//! followed by its mask labels (one byte each).

use super::{MaskVolume, Volume3D};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "volumes.bin";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    volumes: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    id: String,
    extents: [usize; 3],
    image_offset: u64,
    mask_offset: u64,
}

/// Write image/mask pairs to `dir` (created if needed).
pub fn write_cache(dir: &Path, items: &[(Volume3D, MaskVolume)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(items.len());
    for (image, mask) in items {
        if image.extents != mask.extents {
            return Err(Error::Shape(format!(
                "volume {} extents {:?} differ from its mask {:?}",
                image.id, image.extents, mask.extents
            )));
        }
        let image_offset = blob.len() as u64;
        for v in &image.voxels {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let mask_offset = blob.len() as u64;
        blob.extend_from_slice(&mask.labels);
        entries.push(Entry {
            id: image.id.clone(),
            extents: image.extents,
            image_offset,
            mask_offset,
        });
    }
    let manifest = Manifest {
        dtype: "f32".to_string(),
        volumes: entries,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

/// Load every cached volume, in manifest order.
pub fn load_cache(dir: &Path) -> Result<Vec<(Volume3D, MaskVolume)>> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.dtype != "f32" {
        return Err(Error::Format(format!(
            "cache dtype {} is not supported",
            manifest.dtype
        )));
    }
    let blob = fs::read(dir.join(BLOB_FILE))?;
    let mut out = Vec::with_capacity(manifest.volumes.len());
    for e in &manifest.volumes {
        let count: usize = e.extents.iter().product();
        let img_start = e.image_offset as usize;
        let mask_start = e.mask_offset as usize;
        if img_start + count * 4 > blob.len() || mask_start + count > blob.len() {
            return Err(Error::Format(format!("cache blob too short for volume {}", e.id)));
        }
        let voxels: Vec<f32> = blob[img_start..img_start + count * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let labels = blob[mask_start..mask_start + count].to_vec();
        out.push((
            Volume3D::new(e.extents, voxels, e.id.clone())?,
            MaskVolume::new(e.extents, labels)?,
        ));
    }
    Ok(out)
}

/// List cached volume ids without loading voxel data.
pub fn cache_ids(dir: &Path) -> Result<Vec<String>> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    Ok(manifest.volumes.into_iter().map(|e| e.id).collect())
}
