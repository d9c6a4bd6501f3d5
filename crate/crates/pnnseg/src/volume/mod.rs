//! 3D volumes, axial slicing, padding to the network's 64x64 slice format,
//! seed derivation, deterministic splits, and the project PRNG.

pub mod cache;
pub mod nifti;
pub mod rng;
pub mod split;

pub use rng::Rng;
pub use split::{derive_seed, split_dataset, SplitSpec};

use crate::error::{Error, Result};

/// Number of segmentation classes: background, anterior, posterior.
pub const CLASS_COUNT: usize = 3;

/// Real-valued image volume. Extents are (X axial, Y coronal, Z sagittal);
/// voxels are row-major with X outermost, so each axial slice is
/// contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub extents: [usize; 3],
    pub voxels: Vec<f32>,
    pub id: String,
}

impl Volume3D {
    pub fn new(extents: [usize; 3], voxels: Vec<f32>, id: impl Into<String>) -> Result<Self> {
        if extents.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("volume extents must be positive: {extents:?}")));
        }
        let n: usize = extents.iter().product();
        if n != voxels.len() {
            return Err(Error::Shape(format!(
                "extents {extents:?} imply {n} voxels, got {}",
                voxels.len()
            )));
        }
        Ok(Volume3D { extents, voxels, id: id.into() })
    }

    pub fn voxel_count(&self) -> usize {
        self.voxels.len()
    }

    /// Rescale intensities to [0, 1] by the volume's own min and max.
    /// A constant volume maps to all zeros.
    pub fn normalize_min_max(&mut self) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.voxels {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let range = hi - lo;
        if range > 0.0 {
            for v in &mut self.voxels {
                *v = (*v - lo) / range;
            }
        } else {
            self.voxels.fill(0.0);
        }
    }
}

/// Integer label volume over the same grid as its image. Labels are
/// restricted to {0 background, 1 anterior, 2 posterior}.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    pub extents: [usize; 3],
    pub labels: Vec<u8>,
}

impl MaskVolume {
    pub fn new(extents: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        if extents.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("mask extents must be positive: {extents:?}")));
        }
        let n: usize = extents.iter().product();
        if n != labels.len() {
            return Err(Error::Shape(format!(
                "extents {extents:?} imply {n} labels, got {}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= CLASS_COUNT) {
            return Err(Error::Label(format!("mask label {bad} outside {{0, 1, 2}}")));
        }
        Ok(MaskVolume { extents, labels })
    }

    pub fn voxel_count(&self) -> usize {
        self.labels.len()
    }
}

/// One 2D axial slice (coronal rows x sagittal columns), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Slice2D<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} slice needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Slice2D { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Slice2D { rows, cols, data: vec![T::default(); rows * cols] }
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }
}

/// Offsets of the original slice inside its zero-padded frame
/// (row offset, column offset); kept to invert the padding exactly.
pub type PadOffsets = (usize, usize);

/// Center `slice` in a `target x target` zero frame.
pub fn pad_slice_to_target<T: Copy + Default>(
    slice: &Slice2D<T>,
    target: usize,
) -> Result<(Slice2D<T>, PadOffsets)> {
    if slice.rows > target || slice.cols > target {
        return Err(Error::Size(format!(
            "slice {}x{} exceeds padding target {target}",
            slice.rows, slice.cols
        )));
    }
    let off = ((target - slice.rows) / 2, (target - slice.cols) / 2);
    let mut out = Slice2D::zeros(target, target);
    for r in 0..slice.rows {
        let src = &slice.data[r * slice.cols..(r + 1) * slice.cols];
        let dst_row = (r + off.0) * target + off.1;
        out.data[dst_row..dst_row + slice.cols].copy_from_slice(src);
    }
    Ok((out, off))
}

/// Crop the padded frame back to the original extents.
pub fn crop_slice<T: Copy + Default>(
    padded: &Slice2D<T>,
    offsets: PadOffsets,
    rows: usize,
    cols: usize,
) -> Result<Slice2D<T>> {
    if offsets.0 + rows > padded.rows || offsets.1 + cols > padded.cols {
        return Err(Error::Size(format!(
            "crop {rows}x{cols} at {offsets:?} leaves the {}x{} frame",
            padded.rows, padded.cols
        )));
    }
    let mut out = Slice2D::zeros(rows, cols);
    for r in 0..rows {
        let src_row = (r + offsets.0) * padded.cols + offsets.1;
        out.data[r * cols..(r + 1) * cols]
            .copy_from_slice(&padded.data[src_row..src_row + cols]);
    }
    Ok(out)
}

/// Decompose a volume into its axial slices (each Y x Z).
pub fn slice_volume(v: &Volume3D) -> Vec<Slice2D<f32>> {
    let [x, y, z] = v.extents;
    (0..x)
        .map(|i| Slice2D {
            rows: y,
            cols: z,
            data: v.voxels[i * y * z..(i + 1) * y * z].to_vec(),
        })
        .collect()
}

/// Decompose a mask into its axial slices.
pub fn slice_mask(m: &MaskVolume) -> Vec<Slice2D<u8>> {
    let [x, y, z] = m.extents;
    (0..x)
        .map(|i| Slice2D {
            rows: y,
            cols: z,
            data: m.labels[i * y * z..(i + 1) * y * z].to_vec(),
        })
        .collect()
}

/// Stack axial slices back into a volume. Exact inverse of
/// [`slice_volume`] for matching extents.
pub fn reassemble(slices: &[Slice2D<f32>], extents: [usize; 3], id: impl Into<String>) -> Result<Volume3D> {
    let [x, y, z] = extents;
    if slices.len() != x {
        return Err(Error::Shape(format!(
            "expected {x} slices for extents {extents:?}, got {}",
            slices.len()
        )));
    }
    let mut voxels = Vec::with_capacity(x * y * z);
    for s in slices {
        if s.rows != y || s.cols != z {
            return Err(Error::Shape(format!(
                "slice is {}x{}, expected {y}x{z}",
                s.rows, s.cols
            )));
        }
        voxels.extend_from_slice(&s.data);
    }
    Volume3D::new(extents, voxels, id)
}

/// Stack axial mask slices back into a mask volume.
pub fn reassemble_mask(slices: &[Slice2D<u8>], extents: [usize; 3]) -> Result<MaskVolume> {
    let [x, y, z] = extents;
    if slices.len() != x {
        return Err(Error::Shape(format!(
            "expected {x} slices for extents {extents:?}, got {}",
            slices.len()
        )));
    }
    let mut labels = Vec::with_capacity(x * y * z);
    for s in slices {
        if s.rows != y || s.cols != z {
            return Err(Error::Shape(format!(
                "slice is {}x{}, expected {y}x{z}",
                s.rows, s.cols
            )));
        }
        labels.extend_from_slice(&s.data);
    }
    MaskVolume::new(extents, labels)
}
