//! Elastic deformation and horizontal flips, applied jointly to image and
//! mask under per-split policies.
//!
//! Geometry conventions: slices are (coronal rows x sagittal columns);
//! "horizontal" reverses the sagittal (second) axis. When elastic and flip
//! both fire, elastic runs first. Displacement fields are fresh per slice;
//! the flip decision is made once per volume so its slices stay
//! consistent.

use crate::error::{Error, Result};
use crate::volume::{Rng, Slice2D};

/// Which split a policy belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Elastic deformation parameters: `alpha` scales displacements (pixels),
/// `sigma` is the Gaussian smoothing radius (pixels).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElasticParams {
    pub alpha: f64,
    pub sigma: f64,
}

impl ElasticParams {
    /// Classic handwriting-era defaults (alpha 34, sigma 4 on 28-pixel
    /// images), rescaled to the actual slice width.
    pub fn default_for_width(width: usize) -> Self {
        let scale = width as f64 / 28.0;
        ElasticParams { alpha: 34.0 * scale, sigma: 4.0 * scale }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be nonnegative, got {}", self.alpha)));
        }
        if self.sigma <= 0.0 {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Per-split augmentation policy. Constructors enforce the split rules:
/// training gets flips plus elastic, validation flips only, test nothing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPolicy {
    pub flip_probability: f64,
    pub elastic: Option<ElasticParams>,
    pub split: Split,
}

impl AugmentPolicy {
    pub fn train(flip_probability: f64, elastic: ElasticParams) -> Result<Self> {
        elastic.validate()?;
        check_probability(flip_probability)?;
        Ok(AugmentPolicy { flip_probability, elastic: Some(elastic), split: Split::Train })
    }

    pub fn val(flip_probability: f64) -> Result<Self> {
        check_probability(flip_probability)?;
        Ok(AugmentPolicy { flip_probability, elastic: None, split: Split::Val })
    }

    /// Test data stays untouched.
    pub fn test() -> Self {
        AugmentPolicy { flip_probability: 0.0, elastic: None, split: Split::Test }
    }

    pub fn is_identity(&self) -> bool {
        self.split == Split::Test
    }
}

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("flip probability must be in [0, 1], got {p}")));
    }
    Ok(())
}

/// Smoothed random displacement field over a slice: `dy` moves along
/// rows (coronal), `dz` along columns (sagittal).
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub rows: usize,
    pub cols: usize,
    pub dy: Vec<f64>,
    pub dz: Vec<f64>,
}

/// Draw i.i.d. uniform(-1, 1) fields (dy first, then dz, row-major),
/// smooth each with a truncated Gaussian of radius 3 sigma normalized to
/// sum 1, and scale by alpha. Field magnitudes are therefore bounded by
/// alpha.
pub fn make_displacement(
    rows: usize,
    cols: usize,
    params: ElasticParams,
    rng: &mut Rng,
) -> Result<DisplacementField> {
    params.validate()?;
    let mut dy: Vec<f64> = (0..rows * cols).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let mut dz: Vec<f64> = (0..rows * cols).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let kernel = gaussian_kernel(params.sigma);
    smooth_renormalized(&mut dy, rows, cols, &kernel);
    smooth_renormalized(&mut dz, rows, cols, &kernel);
    for v in dy.iter_mut().chain(dz.iter_mut()) {
        *v *= params.alpha;
    }
    Ok(DisplacementField { rows, cols, dy, dz })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable convolution with border renormalization: at each position the
/// in-bounds kernel mass is rescaled to 1, so constants pass through
/// unchanged and outputs stay inside the input range.
fn smooth_renormalized(field: &mut [f64], rows: usize, cols: usize, kernel: &[f64]) {
    let radius = kernel.len() / 2;
    let mut tmp = vec![0.0; field.len()];
    // Along columns within each row.
    for r in 0..rows {
        let row = &field[r * cols..(r + 1) * cols];
        for c in 0..cols {
            let mut acc = 0.0;
            let mut mass = 0.0;
            for (k, &w) in kernel.iter().enumerate() {
                let at = c as isize + k as isize - radius as isize;
                if at >= 0 && (at as usize) < cols {
                    acc += w * row[at as usize];
                    mass += w;
                }
            }
            tmp[r * cols + c] = acc / mass;
        }
    }
    // Along rows within each column.
    for c in 0..cols {
        for r in 0..rows {
            let mut acc = 0.0;
            let mut mass = 0.0;
            for (k, &w) in kernel.iter().enumerate() {
                let at = r as isize + k as isize - radius as isize;
                if at >= 0 && (at as usize) < rows {
                    acc += w * tmp[at as usize * cols + c];
                    mass += w;
                }
            }
            field[r * cols + c] = acc / mass;
        }
    }
}

/// Warp image and mask with the same field: the image is sampled
/// bilinearly at `(r + dy, c + dz)`, the mask with nearest-neighbor; both
/// read zero outside the slice.
pub fn elastic_deform(
    image: &Slice2D<f32>,
    mask: &Slice2D<u8>,
    field: &DisplacementField,
) -> Result<(Slice2D<f32>, Slice2D<u8>)> {
    if (image.rows, image.cols) != (mask.rows, mask.cols)
        || (image.rows, image.cols) != (field.rows, field.cols)
    {
        return Err(Error::Shape(format!(
            "image {}x{}, mask {}x{} and field {}x{} must agree",
            image.rows, image.cols, mask.rows, mask.cols, field.rows, field.cols
        )));
    }
    let (rows, cols) = (image.rows, image.cols);
    let mut out_img = Slice2D::<f32>::zeros(rows, cols);
    let mut out_mask = Slice2D::<u8>::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let at = r * cols + c;
            let y = r as f64 + field.dy[at];
            let z = c as f64 + field.dz[at];
            out_img.data[at] = bilinear_zero(image, y, z);
            out_mask.data[at] = nearest_zero(mask, y, z);
        }
    }
    Ok((out_img, out_mask))
}

fn bilinear_zero(image: &Slice2D<f32>, y: f64, z: f64) -> f32 {
    let y0 = y.floor();
    let z0 = z.floor();
    let wy = y - y0;
    let wz = z - z0;
    let fetch = |r: f64, c: f64| -> f64 {
        if r < 0.0 || c < 0.0 || r as usize >= image.rows || c as usize >= image.cols {
            0.0
        } else {
            image.data[r as usize * image.cols + c as usize] as f64
        }
    };
    let v = fetch(y0, z0) * (1.0 - wy) * (1.0 - wz)
        + fetch(y0, z0 + 1.0) * (1.0 - wy) * wz
        + fetch(y0 + 1.0, z0) * wy * (1.0 - wz)
        + fetch(y0 + 1.0, z0 + 1.0) * wy * wz;
    v as f32
}

fn nearest_zero(mask: &Slice2D<u8>, y: f64, z: f64) -> u8 {
    let r = y.round();
    let c = z.round();
    if r < 0.0 || c < 0.0 || r as usize >= mask.rows || c as usize >= mask.cols {
        0
    } else {
        mask.data[r as usize * mask.cols + c as usize]
    }
}

/// Reverse the sagittal (second) axis of both arrays.
pub fn horizontal_flip(image: &Slice2D<f32>, mask: &Slice2D<u8>) -> (Slice2D<f32>, Slice2D<u8>) {
    (flip_cols(image), flip_cols(mask))
}

fn flip_cols<T: Copy + Default>(s: &Slice2D<T>) -> Slice2D<T> {
    let mut out = Slice2D::<T>::zeros(s.rows, s.cols);
    for r in 0..s.rows {
        for c in 0..s.cols {
            out.data[r * s.cols + c] = s.data[r * s.cols + (s.cols - 1 - c)];
        }
    }
    out
}

/// Apply a policy to one slice pair. Draws one uniform for the flip
/// decision; training also draws a fresh displacement field. Elastic runs
/// before the flip. The test policy returns the pair bitwise unchanged.
pub fn apply_policy(
    image: &Slice2D<f32>,
    mask: &Slice2D<u8>,
    policy: &AugmentPolicy,
    rng: &mut Rng,
) -> Result<(Slice2D<f32>, Slice2D<u8>)> {
    if policy.is_identity() {
        return Ok((image.clone(), mask.clone()));
    }
    let flip = rng.next_f64() < policy.flip_probability;
    let (mut img, mut msk) = match policy.elastic {
        Some(params) => {
            let field = make_displacement(image.rows, image.cols, params, rng)?;
            elastic_deform(image, mask, &field)?
        }
        None => (image.clone(), mask.clone()),
    };
    if flip {
        let flipped = horizontal_flip(&img, &msk);
        img = flipped.0;
        msk = flipped.1;
    }
    Ok((img, msk))
}

/// Apply a policy to a whole volume's slices: one flip decision for the
/// volume, a fresh elastic field per slice.
pub fn apply_policy_volume(
    slices: &mut [(Slice2D<f32>, Slice2D<u8>)],
    policy: &AugmentPolicy,
    rng: &mut Rng,
) -> Result<()> {
    if policy.is_identity() {
        return Ok(());
    }
    let flip = rng.next_f64() < policy.flip_probability;
    for (img, msk) in slices.iter_mut() {
        if let Some(params) = policy.elastic {
            let field = make_displacement(img.rows, img.cols, params, rng)?;
            let (wi, wm) = elastic_deform(img, msk, &field)?;
            *img = wi;
            *msk = wm;
        }
        if flip {
            let (fi, fm) = horizontal_flip(img, msk);
            *img = fi;
            *msk = fm;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn demo_pair(rows: usize, cols: usize) -> (Slice2D<f32>, Slice2D<u8>) {
        let img = Slice2D::new(
            rows,
            cols,
            (0..rows * cols).map(|i| (i as f32 * 0.13).sin()).collect(),
        )
        .unwrap();
        let mask = Slice2D::new(
            rows,
            cols,
            (0..rows * cols)
                .map(|i| if i % 7 == 0 { 1 } else if i % 11 == 0 { 2 } else { 0 })
                .collect(),
        )
        .unwrap();
        (img, mask)
    }

    #[test]
    fn zero_alpha_gives_zero_field() {
        let params = ElasticParams { alpha: 0.0, sigma: 2.0 };
        let f = make_displacement(6, 5, params, &mut Rng::new(1)).unwrap();
        assert!(f.dy.iter().chain(&f.dz).all(|&v| v == 0.0));
    }

    #[test]
    fn smoothing_preserves_constants() {
        let mut field = vec![0.37; 7 * 9];
        let kernel = gaussian_kernel(2.0);
        smooth_renormalized(&mut field, 7, 9, &kernel);
        for v in field {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn field_magnitudes_are_bounded_by_alpha() {
        let params = ElasticParams { alpha: 3.0, sigma: 1.5 };
        let f = make_displacement(20, 20, params, &mut Rng::new(9)).unwrap();
        assert!(f.dy.iter().chain(&f.dz).all(|&v| v.abs() <= 3.0));
        assert!(f.dy.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zero_field_is_identity() {
        let (img, mask) = demo_pair(8, 6);
        let field = DisplacementField {
            rows: 8,
            cols: 6,
            dy: vec![0.0; 48],
            dz: vec![0.0; 48],
        };
        let (wi, wm) = elastic_deform(&img, &mask, &field).unwrap();
        assert_eq!(wi, img);
        assert_eq!(wm, mask);
    }

    #[test]
    fn warped_labels_stay_in_original_set_plus_background() {
        let (img, mask) = demo_pair(16, 16);
        let params = ElasticParams { alpha: 6.0, sigma: 2.0 };
        let field = make_displacement(16, 16, params, &mut Rng::new(4)).unwrap();
        let (_, wm) = elastic_deform(&img, &mask, &field).unwrap();
        let original: HashSet<u8> = mask.data.iter().copied().collect();
        for &l in &wm.data {
            assert!(l == 0 || original.contains(&l));
        }
    }

    #[test]
    fn unit_shift_field_moves_content_by_one_pixel() {
        let (img, mask) = demo_pair(6, 6);
        let field = DisplacementField {
            rows: 6,
            cols: 6,
            dy: vec![1.0; 36],
            dz: vec![0.0; 36],
        };
        let (wi, wm) = elastic_deform(&img, &mask, &field).unwrap();
        for r in 0..5 {
            for c in 0..6 {
                assert!((wi.at(r, c) - img.at(r + 1, c)).abs() < 1e-6);
                assert_eq!(wm.at(r, c), mask.at(r + 1, c));
            }
        }
        // The vacated boundary row reads zero.
        for c in 0..6 {
            assert_eq!(wi.at(5, c), 0.0);
            assert_eq!(wm.at(5, c), 0);
        }
    }

    #[test]
    fn image_and_mask_receive_the_same_transform() {
        // Feed the mask through both sampling paths and compare supports
        // against an independent nearest-neighbor loop.
        let (_, mask) = demo_pair(12, 12);
        let mask_as_img = Slice2D::new(
            12,
            12,
            mask.data.iter().map(|&v| v as f32).collect(),
        )
        .unwrap();
        let params = ElasticParams { alpha: 4.0, sigma: 1.5 };
        let field = make_displacement(12, 12, params, &mut Rng::new(12)).unwrap();
        let (_, wm) = elastic_deform(&mask_as_img, &mask, &field).unwrap();
        for r in 0..12 {
            for c in 0..12 {
                let at = r * 12 + c;
                let y = r as f64 + field.dy[at];
                let z = c as f64 + field.dz[at];
                let expect = nearest_zero(&mask, y, z);
                assert_eq!(wm.at(r, c), expect, "at ({r}, {c})");
            }
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let (img, mask) = demo_pair(9, 7);
        let (fi, fm) = horizontal_flip(&img, &mask);
        let (bi, bm) = horizontal_flip(&fi, &fm);
        assert_eq!(bi, img);
        assert_eq!(bm, mask);
        assert_eq!(fi.at(0, 0), img.at(0, 6));
    }

    #[test]
    fn flip_probability_extremes() {
        let (img, mask) = demo_pair(4, 4);
        let never = AugmentPolicy::val(0.0).unwrap();
        let always = AugmentPolicy::val(1.0).unwrap();
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let (i2, _) = apply_policy(&img, &mask, &never, &mut rng).unwrap();
            assert_eq!(i2, img);
            let (i3, _) = apply_policy(&img, &mask, &always, &mut rng).unwrap();
            assert_eq!(i3, horizontal_flip(&img, &mask).0);
        }
    }

    #[test]
    fn test_policy_is_bitwise_identity() {
        let (img, mask) = demo_pair(10, 10);
        let mut rng = Rng::new(77);
        let (i2, m2) = apply_policy(&img, &mask, &AugmentPolicy::test(), &mut rng).unwrap();
        assert_eq!(i2, img);
        assert_eq!(m2, mask);
        // The identity policy consumes no randomness.
        assert_eq!(rng, Rng::new(77));
    }

    #[test]
    fn augmentation_is_reproducible_from_rng_state() {
        let (img, mask) = demo_pair(16, 16);
        let policy =
            AugmentPolicy::train(0.25, ElasticParams { alpha: 5.0, sigma: 2.0 }).unwrap();
        let out1 = apply_policy(&img, &mask, &policy, &mut Rng::new(5)).unwrap();
        let out2 = apply_policy(&img, &mask, &policy, &mut Rng::new(5)).unwrap();
        assert_eq!(out1, out2);
    }

    #[test]
    fn background_fraction_never_decreases_under_shifts() {
        // Translation fields on boundary-touching content: in-bounds
        // pulls are injective, out-of-bounds reads fill with background.
        let (img, mask) = demo_pair(10, 10);
        let zero_before = mask.data.iter().filter(|&&v| v == 0).count();
        for (dy, dz) in [(1.0, 0.0), (-2.0, 1.0), (0.0, 3.0), (-1.0, -1.0)] {
            let field = DisplacementField {
                rows: 10,
                cols: 10,
                dy: vec![dy; 100],
                dz: vec![dz; 100],
            };
            let (_, wm) = elastic_deform(&img, &mask, &field).unwrap();
            let zero_after = wm.data.iter().filter(|&&v| v == 0).count();
            assert!(zero_after >= zero_before, "shift ({dy}, {dz})");
        }
    }

    #[test]
    fn volume_flip_decision_is_shared_across_slices() {
        let slices: Vec<_> = (0..4).map(|_| demo_pair(8, 8)).collect();
        let policy = AugmentPolicy::val(0.5).unwrap();
        // Find a seed that flips (u < 0.5) and check every slice flipped.
        let mut rng = Rng::new(2);
        let mut work = slices.clone();
        let u_would_be = Rng::new(2).next_f64();
        apply_policy_volume(&mut work, &policy, &mut rng).unwrap();
        let flipped = u_would_be < 0.5;
        for ((img, _), (orig_img, _)) in work.iter().zip(&slices) {
            if flipped {
                assert_eq!(*img, flip_cols(orig_img));
            } else {
                assert_eq!(*img, *orig_img);
            }
        }
    }
}
