//! Additive noise budgeting and composition of the full perturbation.

use ndarray::{Array3, Array4, ArrayView3, ArrayView4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, GuapError, Result};
use crate::flowwarp::{warp_forward, FlowField, ImageBatch};
use crate::tensor::{cast, Float};

/// Below this the raw noise is treated as all-zero.
pub const DEGENERATE_NOISE: f64 = 1e-12;

/// Universal additive perturbation `(c, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseField<T: Float = f32> {
    data: Array3<T>,
}

impl<T: Float> NoiseField<T> {
    pub fn new(data: Array3<T>) -> Result<Self> {
        ensure!(data.iter().all(|v| v.is_finite()), "noise field contains non-finite values");
        Ok(Self { data })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            data: Array3::zeros((c, h, w)),
        }
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<T> {
        self.data
    }

    pub fn linf(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs().as_f64()))
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == T::zero())
    }
}

/// Attack budgets: `epsilon` bounds the additive noise in l-infinity, `tau`
/// bounds the flow field's smoothness (in pixels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackBudget {
    pub epsilon: f64,
    pub tau: f64,
}

impl AttackBudget {
    pub fn new(epsilon: f64, tau: f64) -> Result<Self> {
        ensure!(
            epsilon.is_finite() && (0.0..=1.0).contains(&epsilon),
            "epsilon must lie in [0, 1], got {epsilon}"
        );
        ensure!(tau.is_finite() && tau >= 0.0, "tau must be non-negative, got {tau}");
        Ok(Self { epsilon, tau })
    }

    /// Additive-only attack (eps = 0.04, tau = 0).
    pub const V1: AttackBudget = AttackBudget { epsilon: 0.04, tau: 0.0 };
    /// Combined attack with the smaller noise budget (eps = 0.03, tau = 0.1).
    pub const V2: AttackBudget = AttackBudget { epsilon: 0.03, tau: 0.1 };
    /// Combined attack (eps = 0.04, tau = 0.1).
    pub const V3: AttackBudget = AttackBudget { epsilon: 0.04, tau: 0.1 };

    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "v1" | "guap_v1" => Ok(Self::V1),
            "v2" | "guap_v2" => Ok(Self::V2),
            "v3" | "guap_v3" => Ok(Self::V3),
            _ => Err(GuapError::UnknownPreset(name.to_string())),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.epsilon == 0.0 && self.tau == 0.0
    }
}

/// Rescale raw noise so its l-infinity norm equals `epsilon` exactly.
pub fn scale_noise<T: Float>(delta0: &NoiseField<T>, epsilon: f64) -> Result<NoiseField<T>> {
    ensure!(epsilon.is_finite() && epsilon >= 0.0, "epsilon must be non-negative, got {epsilon}");
    let norm = delta0.linf();
    if epsilon == 0.0 || norm <= DEGENERATE_NOISE {
        let (c, h, w) = delta0.data.dim();
        return Ok(NoiseField::zeros(c, h, w));
    }
    let factor = cast::<T>(epsilon / norm);
    Ok(NoiseField {
        data: delta0.data.mapv(|v| v * factor),
    })
}

/// `clip(x + delta, 0, 1)` with `delta` broadcast over the batch.
pub fn add_noise_clip<T: Float>(x: ArrayView4<T>, delta: ArrayView3<T>) -> Array4<T> {
    let mut out = x.to_owned();
    for mut img in out.axis_iter_mut(Axis(0)) {
        Zip::from(&mut img)
            .and(&delta)
            .for_each(|v, &d| *v = (*v + d).max(T::zero()).min(T::one()));
    }
    out
}

/// `Clip(warp(x, f) + delta, 0, 1)`: warp first, then add, then clip.
pub fn compose_adversarial<T: Float>(
    x: &ImageBatch<T>,
    f: &FlowField<T>,
    delta: &NoiseField<T>,
) -> Result<ImageBatch<T>> {
    let (c, h, w) = x.image_dims();
    if f.dims() != (h, w) {
        return Err(GuapError::shape((2, h, w), f.data().dim()));
    }
    if delta.data.dim() != (c, h, w) {
        return Err(GuapError::shape((c, h, w), delta.data.dim()));
    }
    let warped = if f.is_identity() {
        x.data().clone()
    } else {
        warp_forward(x.data().view(), f.data().view())
    };
    ImageBatch::new(add_noise_clip(warped.view(), delta.data.view()))
}
