//! NIfTI-1 reader: single-file volumes (magic "n+1"), optionally
//! gzip-compressed, little- or big-endian.
//!
//! Deliberately rejected rather than guessed: detached-header files
//! (magic "ni1") and volumes whose dimensionality is not exactly 3.

use super::{MaskVolume, Volume3D};
use crate::error::{Error, Result};
use std::io::Read;

const HEADER_LEN: usize = 348;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

/// Parse a `.nii` / `.nii.gz` byte stream into a volume.
pub fn parse_nifti(bytes: &[u8], id: &str) -> Result<Volume3D> {
    let raw = maybe_gunzip(bytes)?;
    let (extents, voxels) = parse_payload(&raw)?;
    Volume3D::new(extents, voxels, id)
}

/// Parse a label file: same format, with voxel values restricted to the
/// label set {0, 1, 2} (within float rounding).
pub fn parse_nifti_mask(bytes: &[u8]) -> Result<MaskVolume> {
    let raw = maybe_gunzip(bytes)?;
    let (extents, voxels) = parse_payload(&raw)?;
    let mut labels = Vec::with_capacity(voxels.len());
    for v in voxels {
        let rounded = v.round();
        if (v - rounded).abs() > 1e-3 || !(0.0..=2.0).contains(&rounded) {
            return Err(Error::Label(format!("mask voxel {v} is not a label in {{0, 1, 2}}")));
        }
        labels.push(rounded as u8);
    }
    MaskVolume::new(extents, labels)
}

fn maybe_gunzip(bytes: &[u8]) -> Result<Vec<u8>> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(bytes)
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("bad gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(bytes.to_vec())
    }
}

fn parse_payload(raw: &[u8]) -> Result<([usize; 3], Vec<f32>)> {
    if raw.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
            raw.len()
        )));
    }

    // Endianness: dim[0] (number of dimensions) must land in 1..=7.
    let ndim_le = i16::from_le_bytes([raw[40], raw[41]]);
    let big_endian = if (1..=7).contains(&ndim_le) {
        false
    } else {
        let ndim_be = i16::from_be_bytes([raw[40], raw[41]]);
        if (1..=7).contains(&ndim_be) {
            true
        } else {
            return Err(Error::Format(format!(
                "dim[0] = {ndim_le} is not in 1..=7 under either byte order"
            )));
        }
    };

    let read_i16 = |at: usize| -> i16 {
        let b = [raw[at], raw[at + 1]];
        if big_endian { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }
    };
    let read_i32 = |at: usize| -> i32 {
        let b = [raw[at], raw[at + 1], raw[at + 2], raw[at + 3]];
        if big_endian { i32::from_be_bytes(b) } else { i32::from_le_bytes(b) }
    };
    let read_f32 = |at: usize| -> f32 {
        let b = [raw[at], raw[at + 1], raw[at + 2], raw[at + 3]];
        if big_endian { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) }
    };

    if read_i32(0) != HEADER_LEN as i32 {
        return Err(Error::Format(format!(
            "sizeof_hdr is {}, expected {HEADER_LEN}",
            read_i32(0)
        )));
    }

    match &raw[344..348] {
        b"n+1\0" => {}
        b"ni1\0" => {
            return Err(Error::Format(
                "detached-header file (magic \"ni1\") is not supported".into(),
            ))
        }
        other => {
            return Err(Error::Format(format!("bad magic {other:?}")));
        }
    }

    let ndim = read_i16(40);
    if ndim != 3 {
        // Trailing singleton dimensions are not folded; shape guessing is
        // worse than a clear error.
        return Err(Error::Unsupported(format!(
            "volume has dim[0] = {ndim}, only 3-dimensional volumes are handled"
        )));
    }
    let dims = [read_i16(42), read_i16(44), read_i16(46)];
    if dims.iter().any(|&d| d <= 0) {
        return Err(Error::Format(format!("non-positive extent in dim: {dims:?}")));
    }
    let extents = [dims[0] as usize, dims[1] as usize, dims[2] as usize];
    let count: usize = extents.iter().product();

    let datatype = read_i16(70);
    let elem_size = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_INT32 => 4,
        DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => {
            return Err(Error::Unsupported(format!("datatype code {other} is not handled")));
        }
    };

    let vox_offset = read_f32(108);
    if vox_offset < HEADER_LEN as f32 || vox_offset.fract() != 0.0 {
        return Err(Error::Format(format!("bad vox_offset {vox_offset}")));
    }
    let data_start = vox_offset as usize;
    let need = data_start + count * elem_size;
    if raw.len() < need {
        return Err(Error::Format(format!(
            "truncated payload: need {need} bytes, have {}",
            raw.len()
        )));
    }

    let scl_slope = read_f32(112);
    let scl_inter = read_f32(116);
    let scale = |v: f32| -> f32 {
        if scl_slope != 0.0 { v * scl_slope + scl_inter } else { v }
    };

    let body = &raw[data_start..need];
    let fetch = |i: usize| -> f32 {
        let at = i * elem_size;
        match datatype {
            DT_UINT8 => body[at] as f32,
            DT_INT16 => {
                let b = [body[at], body[at + 1]];
                (if big_endian { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }) as f32
            }
            DT_INT32 => {
                let b = [body[at], body[at + 1], body[at + 2], body[at + 3]];
                (if big_endian { i32::from_be_bytes(b) } else { i32::from_le_bytes(b) }) as f32
            }
            DT_FLOAT32 => {
                let b = [body[at], body[at + 1], body[at + 2], body[at + 3]];
                if big_endian { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) }
            }
            DT_FLOAT64 => {
                let mut b = [0u8; 8];
                b.copy_from_slice(&body[at..at + 8]);
                (if big_endian { f64::from_be_bytes(b) } else { f64::from_le_bytes(b) }) as f32
            }
            _ => unreachable!(),
        }
    };

    // NIfTI stores the first dimension fastest; reorder to row-major with
    // the axial (X) dimension outermost.
    let [x, y, z] = extents;
    let mut voxels = vec![0.0f32; count];
    for k in 0..z {
        for j in 0..y {
            for i in 0..x {
                voxels[(i * y + j) * z + k] = scale(fetch(i + x * (j + y * k)));
            }
        }
    }
    Ok((extents, voxels))
}
