//! Procedural grating benchmark: a stand-in dataset for machines without
//! CIFAR-10. Each class is a low-contrast sinusoidal grating with its own
//! orientation and spatial frequency, drawn over a random background colour
//! with a random phase and pixel noise.

use std::f64::consts::PI;

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::{LabeledDataset, Split};
use crate::error::{ensure, Result};
use crate::flowwarp::ImageBatch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GratingSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub train_size: usize,
    pub heldout_size: usize,
    /// Grating amplitude is drawn uniformly from this range.
    pub contrast: (f64, f64),
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for GratingSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            height: 32,
            width: 32,
            train_size: 10_000,
            heldout_size: 2_000,
            contrast: (0.05, 0.12),
            pixel_noise: 0.06,
            seed: 0,
        }
    }
}

/// Orientation (radians) and cycles per image for class `k`.
fn class_pattern(k: usize, num_classes: usize) -> (f64, f64) {
    let orientations = num_classes.div_ceil(2);
    let theta = PI * (k % orientations) as f64 / orientations as f64;
    let cycles = if k < orientations { 3.0 } else { 6.0 };
    (theta, cycles)
}

fn render(spec: &GratingSpec, n: usize, rng: &mut ChaCha8Rng) -> (Array4<f32>, Vec<usize>) {
    let (h, w) = (spec.height, spec.width);
    let noise = Normal::new(0.0, spec.pixel_noise.max(0.0)).expect("valid noise level");
    let mut images = Array4::<f32>::zeros((n, 3, h, w));
    let mut labels = Vec::with_capacity(n);
    for (i, mut img) in images.outer_iter_mut().enumerate() {
        let k = i % spec.num_classes;
        labels.push(k);
        let (theta, cycles) = class_pattern(k, spec.num_classes);
        let theta = theta + rng.random_range(-0.1..0.1);
        let phase = rng.random_range(0.0..2.0 * PI);
        let amp = rng.random_range(spec.contrast.0..=spec.contrast.1);
        let background: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
        let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.0));
        let (ct, st) = (theta.cos(), theta.sin());
        for y in 0..h {
            for x in 0..w {
                let t = (x as f64 / w as f64) * ct + (y as f64 / h as f64) * st;
                let wave = (2.0 * PI * cycles * t + phase).sin();
                for c in 0..3 {
                    let v = background[c] + amp * tint[c] * wave + noise.sample(rng);
                    img[[c, y, x]] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    (images, labels)
}

/// Deterministic train and held-out splits. Classes are interleaved so any
/// prefix of the training split is class-balanced.
pub fn grating_benchmark(spec: &GratingSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    ensure!(spec.num_classes >= 2, "benchmark needs at least two classes");
    ensure!(spec.train_size >= 1 && spec.heldout_size >= 1, "both splits must be non-empty");
    ensure!(
        spec.contrast.0 >= 0.0 && spec.contrast.0 <= spec.contrast.1,
        "contrast range must be ordered and non-negative"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (xa, ya) = render(spec, spec.train_size, &mut rng);
    let (xb, yb) = render(spec, spec.heldout_size, &mut rng);
    let train = LabeledDataset::new(ImageBatch::new(xa)?, ya, spec.num_classes, Split::Train)?;
    let test = LabeledDataset::new(ImageBatch::new(xb)?, yb, spec.num_classes, Split::HeldOut)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> GratingSpec {
        GratingSpec {
            height: 16,
            width: 16,
            train_size: 40,
            heldout_size: 20,
            ..GratingSpec::default()
        }
    }

    #[test]
    fn deterministic_and_disjoint() {
        let (a, b) = grating_benchmark(&small()).unwrap();
        let (a2, _) = grating_benchmark(&small()).unwrap();
        assert_eq!(a, a2);
        let train: HashSet<_> = a.image_digests().into_iter().collect();
        assert!(b.image_digests().iter().all(|d| !train.contains(d)));
        assert_eq!(a.labels()[..10], (0..10).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn class_patterns_are_distinct() {
        let set: HashSet<_> = (0..10)
            .map(|k| {
                let (t, c) = class_pattern(k, 10);
                ((t * 1e6) as i64, c as i64)
            })
            .collect();
        assert_eq!(set.len(), 10);
    }
}
