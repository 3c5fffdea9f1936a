//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-pixel bilinear sampling written directly from the weight formula
/// `(1 - |u - uq|) (1 - |v - vq|)` over the four grid neighbours, with reads
/// clamped to the image.
pub fn warp_oracle(x: &Array4<f64>, flow: &Array3<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::zeros((n, c, h, w));
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let u = (i as f64 + flow[[0, i, j]]).clamp(0.0, (h - 1) as f64);
                    let v = (j as f64 + flow[[1, i, j]]).clamp(0.0, (w - 1) as f64);
                    let mut acc = 0.0;
                    for uq in [u.floor(), u.floor() + 1.0] {
                        for vq in [v.floor(), v.floor() + 1.0] {
                            let wu = (1.0 - (u - uq).abs()).max(0.0);
                            let wv = (1.0 - (v - vq).abs()).max(0.0);
                            if wu * wv == 0.0 {
                                continue;
                            }
                            let qi = (uq as usize).min(h - 1);
                            let qj = (vq as usize).min(w - 1);
                            acc += wu * wv * x[[b, ch, qi, qj]];
                        }
                    }
                    out[[b, ch, i, j]] = acc;
                }
            }
        }
    }
    out
}

/// Flow budget by explicit loops over the four neighbour directions with
/// edge replication.
pub fn budget_oracle(flow: &Array3<f64>) -> f64 {
    let (_, h, w) = flow.dim();
    let dirs: [(i64, i64); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
    let mut best = 0.0f64;
    for (di, dj) in dirs {
        let mut sum = 0.0;
        for i in 0..h as i64 {
            for j in 0..w as i64 {
                let qi = (i + di).clamp(0, h as i64 - 1) as usize;
                let qj = (j + dj).clamp(0, w as i64 - 1) as usize;
                let (i, j) = (i as usize, j as usize);
                let du = flow[[0, i, j]] - flow[[0, qi, qj]];
                let dv = flow[[1, i, j]] - flow[[1, qi, qj]];
                sum += du * du + dv * dv;
            }
        }
        best = best.max((sum / (h * w) as f64).sqrt());
    }
    best
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform3(shape: (usize, usize, usize), lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.random_range(lo..hi))
}

pub fn uniform4(shape: (usize, usize, usize, usize), lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || rng.random_range(lo..hi))
}

/// `|a - b| / max(|a|, |b|)` over whole vectors, with an absolute floor.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}
