//! Procedural labeled textures used in place of a natural-image corpus.
//!
//! Class `c` of `C` owns a grating orientation, a grating frequency and an
//! anchor for Gaussian blobs. Each image draws a random phase, small jitters of
//! those parameters, and blob positions around the anchor.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::image::Image;
use crate::data::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub side: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: usize,
}

/// Texture parameters shared by every image of one class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassTexture {
    /// Grating direction in radians.
    pub orientation: f64,
    /// Grating cycles across the image side.
    pub frequency: f64,
    /// Blob anchor as fractions of the side, `(row, col)`.
    pub anchor: (f64, f64),
}

const GRATING_AMPLITUDE: f64 = 0.22;
const BLOB_AMPLITUDE: f64 = 0.3;
const BLOBS_PER_IMAGE: usize = 2;
const LOW_FREQUENCY: f64 = 1.5;
const HIGH_FREQUENCY: f64 = 4.0;

pub fn class_texture(class: usize, classes: usize) -> ClassTexture {
    let t = class as f64 / classes as f64;
    let spread = if classes > 1 {
        class as f64 / (classes - 1) as f64
    } else {
        0.0
    };
    let angle = 2.0 * PI * t + PI / 4.0;
    ClassTexture {
        orientation: PI * t,
        frequency: LOW_FREQUENCY + (HIGH_FREQUENCY - LOW_FREQUENCY) * spread,
        anchor: (0.5 + 0.28 * angle.sin(), 0.5 + 0.28 * angle.cos()),
    }
}

fn render(tex: &ClassTexture, side: usize, rng: &mut ChaCha8Rng) -> Image {
    let s = side as f64;
    let phase = rng.random_range(0.0..2.0 * PI);
    let theta = tex.orientation + rng.random_range(-0.1..0.1);
    let freq = tex.frequency * rng.random_range(0.95..1.05);
    let jitter = Normal::new(0.0, 0.08).expect("valid sigma");
    let blobs: Vec<(f64, f64)> = (0..BLOBS_PER_IMAGE)
        .map(|_| {
            (
                (tex.anchor.0 + jitter.sample(rng)) * s,
                (tex.anchor.1 + jitter.sample(rng)) * s,
            )
        })
        .collect();
    let blob_sigma = 0.12 * s;
    let tint: [f64; 3] = [
        rng.random_range(0.9..1.1),
        rng.random_range(0.9..1.1),
        rng.random_range(0.9..1.1),
    ];
    let noise: Vec<f64> = (0..side * side).map(|_| rng.random_range(-0.03..0.03)).collect();
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    Image::from_fn(side, side, |y, x, c| {
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        let along = (fx * cos_t + fy * sin_t) / s;
        let grating = GRATING_AMPLITUDE * (2.0 * PI * freq * along + phase).sin();
        let blob: f64 = blobs
            .iter()
            .map(|&(by, bx)| {
                let d2 = (fy - by).powi(2) + (fx - bx).powi(2);
                BLOB_AMPLITUDE * (-d2 / (2.0 * blob_sigma * blob_sigma)).exp()
            })
            .sum();
        let v = 0.4 + grating * tint[c] + blob + noise[y * side + x];
        v.clamp(0.0, 1.0) as f32
    })
    .expect("clamped pixels")
}

/// Deterministic labeled dataset, `per_class` images per class, ordered by
/// class then index.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Vec<LabeledImage>, DataError> {
    if spec.classes < 2 {
        return Err(DataError::InvalidArgument("need at least 2 classes".into()));
    }
    if spec.per_class == 0 || spec.side == 0 {
        return Err(DataError::InvalidArgument(
            "per-class count and side must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.classes * spec.per_class);
    for label in 0..spec.classes {
        let tex = class_texture(label, spec.classes);
        for _ in 0..spec.per_class {
            out.push(LabeledImage {
                image: render(&tex, spec.side, &mut rng),
                label,
            });
        }
    }
    Ok(out)
}

/// Deterministic train/validation split: a seeded shuffle, with the first
/// `ceil(n * fraction)` indices held out (at least one when `n >= 2`).
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = ((n as f64 * fraction).ceil() as usize).clamp(usize::from(n >= 2), n.saturating_sub(1));
    let val = idx[..held].to_vec();
    let mut train = idx[held..].to_vec();
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (train, val)
}
