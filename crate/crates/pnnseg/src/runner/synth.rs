//! Deterministic synthetic volumes: two ellipsoid structures (anterior
//! and posterior) on a smooth background, learnable at desk scale and
//! useful wherever the real dataset is absent.

use crate::volume::{MaskVolume, Rng, Slice2D, Volume3D};

struct Blob {
    center: [f64; 3],
    radii: [f64; 3],
    intensity: f32,
    label: u8,
}

impl Blob {
    fn contains(&self, p: [f64; 3]) -> bool {
        let mut acc = 0.0;
        for i in 0..3 {
            let d = (p[i] - self.center[i]) / self.radii[i];
            acc += d * d;
        }
        acc <= 1.0
    }
}

/// Generate `count` image/mask pairs with the given extents. Fully
/// determined by `seed`.
pub fn synthetic_dataset(count: usize, extents: [usize; 3], seed: u64) -> Vec<(Volume3D, MaskVolume)> {
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|i| synthetic_volume(&format!("synth_{i:03}"), extents, &mut rng))
        .collect()
}

fn synthetic_volume(id: &str, extents: [usize; 3], rng: &mut Rng) -> (Volume3D, MaskVolume) {
    let [x, y, z] = extents;
    let dims = [x as f64, y as f64, z as f64];
    let blob = |rng: &mut Rng, along: f64, intensity: f32, label: u8| {
        let center = [
            dims[0] * rng.uniform_in(0.35, 0.65),
            dims[1] * rng.uniform_in(0.30 + along, 0.40 + along),
            dims[2] * rng.uniform_in(0.35, 0.65),
        ];
        let radii = [
            (dims[0] * rng.uniform_in(0.18, 0.30)).max(1.0),
            (dims[1] * rng.uniform_in(0.16, 0.24)).max(1.0),
            (dims[2] * rng.uniform_in(0.20, 0.30)).max(1.0),
        ];
        Blob { center, radii, intensity, label }
    };
    // Anterior sits forward of posterior along the coronal axis.
    let anterior = blob(rng, 0.0, 0.9, 1);
    let posterior = blob(rng, 0.3, 0.55, 2);

    let mut voxels = Vec::with_capacity(x * y * z);
    let mut labels = Vec::with_capacity(x * y * z);
    for i in 0..x {
        for j in 0..y {
            for k in 0..z {
                let p = [i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5];
                let background = 0.12 + 0.10 * (p[1] / dims[1]) as f32;
                let noise = (rng.next_f64() as f32 - 0.5) * 0.04;
                let (value, label) = if anterior.contains(p) {
                    (anterior.intensity, anterior.label)
                } else if posterior.contains(p) {
                    (posterior.intensity, posterior.label)
                } else {
                    (background, 0)
                };
                voxels.push(value + noise);
                labels.push(label);
            }
        }
    }
    let mut vol = Volume3D::new(extents, voxels, id).expect("extents are positive");
    vol.normalize_min_max();
    let mask = MaskVolume::new(extents, labels).expect("labels in range");
    (vol, mask)
}

/// Generate standalone 2D slice pairs of `size x size` pixels, one blob
/// pair per slice.
pub fn synthetic_slices(count: usize, size: usize, seed: u64) -> Vec<(Slice2D<f32>, Slice2D<u8>)> {
    synthetic_dataset(count, [1, size, size], seed)
        .into_iter()
        .map(|(vol, mask)| {
            (
                Slice2D::new(size, size, vol.voxels).expect("sizes agree"),
                Slice2D::new(size, size, mask.labels).expect("sizes agree"),
            )
        })
        .collect()
}
