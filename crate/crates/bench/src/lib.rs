//! Deterministic fixtures shared by the benchmarks.

use flim::encoder::{BlockSpec, TrainingImage};
use flim::markers::{Label, Marker, MarkerSet};
use flim::tensor::FeatureMap;
use flim::{KernelBank, SaliencyMap};

/// Cheap integer hash mapped to [0, 1); stands in for texture noise.
fn noise(x: usize, y: usize, c: usize, salt: usize) -> f32 {
    let mut h = (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ ((c + 8 * salt) as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    h ^= h >> 29;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 32;
    (h % 10_000) as f32 / 10_000.0
}

fn in_object(x: usize, y: usize, size: usize) -> bool {
    let c = size as f64 / 2.0;
    let (dx, dy) = (x as f64 - c, (y as f64 - c) * 1.4);
    (dx * dx + dy * dy).sqrt() < size as f64 / 4.0
}

/// RGB image in [0, 255] with one bright ellipse on a textured background.
pub fn scene(size: usize, salt: usize) -> FeatureMap {
    FeatureMap::from_fn(size, size, 3, |x, y, c| {
        let base = if in_object(x, y, size) {
            [200.0, 150.0, 60.0][c]
        } else {
            [70.0, 90.0, 80.0][c]
        };
        base + 30.0 * noise(x, y, c, salt)
    })
    .expect("valid dimensions")
}

/// Ideal saliency for [`scene`]: 1 inside the object, 0 outside.
pub fn object_saliency(size: usize) -> SaliencyMap {
    SaliencyMap::from_fn(size, size, |x, y| if in_object(x, y, size) { 1.0 } else { 0.0 }).expect("valid dimensions")
}

/// Two foreground markers on the object and three on the background.
pub fn markers(size: usize) -> MarkerSet {
    let s = size as u32;
    MarkerSet::new(
        "scene.png",
        vec![
            Marker::new(1, s / 2, s / 2, Label::Foreground),
            Marker::new(2, s / 2 + s / 8, s / 2, Label::Foreground),
            Marker::new(3, s / 10, s / 10, Label::Background),
            Marker::new(4, s - s / 10, s / 8, Label::Background),
            Marker::new(5, s / 2, s - s / 12, Label::Background),
        ],
    )
}

pub fn training_set(size: usize, n: usize) -> Vec<TrainingImage> {
    (0..n)
        .map(|i| TrainingImage {
            id: format!("scene_{i}"),
            image: scene(size, i),
            markers: markers(size),
        })
        .collect()
}

/// Random-looking bank of `n` kernels over `channels` channels.
pub fn kernel_bank(k: usize, channels: usize, n: usize) -> KernelBank {
    let kernels = (0..n)
        .map(|i| (0..k * k * channels).map(|j| noise(i, j, 0, 99) - 0.5).collect())
        .collect();
    let labels = (0..n)
        .map(|i| if i % 2 == 0 { Label::Foreground } else { Label::Background })
        .collect();
    KernelBank::new(kernels, None, labels, k, 1).expect("consistent kernels")
}

/// Points in `dim` dimensions drawn from a few separated blobs.
pub fn cluster_points(n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..dim).map(|d| (i % 4) as f64 * 3.0 + noise(i, d, 0, 7) as f64).collect())
        .collect()
}

pub fn blocks(n: usize) -> Vec<BlockSpec> {
    vec![BlockSpec::new(3, 2); n]
}
