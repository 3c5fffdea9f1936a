//! Spatial transformation of images by a universal flow field.
//!
//! Output pixel `(i, j)` samples the input at `(i + du, j + dv)` with bilinear
//! interpolation over its four grid neighbours. Sampling coordinates are
//! clamped to `[0, h-1] x [0, w-1]`, so the border row/column is replicated and
//! every output value is a convex combination of input values. The same flow
//! is applied to every channel and every image in the batch.
//!
//! The flow budget is the largest, over the four Von Neumann directions, of
//! the root-mean-square difference between each pixel's flow and its
//! neighbour's flow. Out-of-bounds neighbours are replicate-padded and so
//! contribute zero.

use ndarray::{Array3, Array4, ArrayView3, ArrayView4};

use crate::error::{ensure, GuapError, Result};
use crate::tensor::{cast, Float};

/// Budgets at or below this are treated as a constant (degenerate) flow.
pub const DEGENERATE_BUDGET: f64 = 1e-12;

/// A batch of images `(n, c, h, w)` with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch<T: Float = f32> {
    data: Array4<T>,
}

impl<T: Float> ImageBatch<T> {
    pub fn new(data: Array4<T>) -> Result<Self> {
        let (n, c, h, w) = data.dim();
        ensure!(n >= 1, "image batch must contain at least one image");
        ensure!(c == 1 || c == 3, "images must have 1 or 3 channels, got {c}");
        ensure!(h >= 2 && w >= 2, "images must be at least 2x2, got {h}x{w}");
        ensure!(
            data.iter().all(|v| v.is_finite() && *v >= T::zero() && *v <= T::one()),
            "image intensities must be finite and within [0, 1]"
        );
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array4<T> {
        &self.data
    }

    pub fn into_inner(self) -> Array4<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(c, h, w)` of each image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.data.dim();
        (c, h, w)
    }
}

/// Per-pixel displacement `(2, h, w)`: channel 0 is the vertical offset `du`,
/// channel 1 the horizontal offset `dv`, both in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<T: Float = f32> {
    data: Array3<T>,
}

impl<T: Float> FlowField<T> {
    pub fn new(data: Array3<T>) -> Result<Self> {
        let (k, h, w) = data.dim();
        ensure!(k == 2, "flow field must have 2 channels, got {k}");
        ensure!(h >= 1 && w >= 1, "flow field must be non-empty");
        ensure!(data.iter().all(|v| v.is_finite()), "flow field contains non-finite values");
        Ok(Self { data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            data: Array3::zeros((2, h, w)),
        }
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<T> {
        self.data
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }

    pub fn is_identity(&self) -> bool {
        self.data.iter().all(|v| *v == T::zero())
    }
}

/// Non-negative smoothness measure of a flow field.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct FlowMetric(f64);

impl FlowMetric {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Source coordinate for a single axis: position plus offset, clamped to the
/// valid pixel range. Returns (floor index, next index, fraction, in-range flag).
#[inline]
fn sample_axis<T: Float>(pos: usize, offset: T, len: usize) -> (usize, usize, T, bool) {
    let max = cast::<T>((len - 1) as f64);
    let raw = cast::<T>(pos as f64) + offset;
    let inside = raw > T::zero() && raw < max;
    let c = raw.max(T::zero()).min(max);
    let lo = c.floor();
    let i0 = lo.as_f64() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, c - lo, inside)
}

/// Bilinear warp of raw arrays. `flow` must be `(2, h, w)` matching `x`.
pub fn warp_forward<T: Float>(x: ArrayView4<T>, flow: ArrayView3<T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    assert_eq!(flow.dim(), (2, h, w), "flow shape must match image spatial dims");
    let mut out = Array4::<T>::zeros((n, c, h, w));
    for i in 0..h {
        for j in 0..w {
            let (y0, y1, a, _) = sample_axis(i, flow[[0, i, j]], h);
            let (x0, x1, b, _) = sample_axis(j, flow[[1, i, j]], w);
            let (wa, wb) = (T::one() - a, T::one() - b);
            for bi in 0..n {
                for ch in 0..c {
                    let top = x[[bi, ch, y0, x0]] * wb + x[[bi, ch, y0, x1]] * b;
                    let bottom = x[[bi, ch, y1, x0]] * wb + x[[bi, ch, y1, x1]] * b;
                    out[[bi, ch, i, j]] = top * wa + bottom * a;
                }
            }
        }
    }
    out
}

/// Adjoint of [`warp_forward`]: returns `(d loss / d x, d loss / d flow)` given
/// the upstream gradient. The flow gradient is summed over batch and channels
/// and is zero along an axis whose sampling coordinate was clamped.
pub fn warp_backward<T: Float>(
    x: ArrayView4<T>,
    flow: ArrayView3<T>,
    grad_out: ArrayView4<T>,
    need_x: bool,
    need_flow: bool,
) -> (Option<Array4<T>>, Option<Array3<T>>) {
    let (n, c, h, w) = x.dim();
    let mut dx = need_x.then(|| Array4::<T>::zeros((n, c, h, w)));
    let mut dflow = need_flow.then(|| Array3::<T>::zeros((2, h, w)));
    for i in 0..h {
        for j in 0..w {
            let (y0, y1, a, in_u) = sample_axis(i, flow[[0, i, j]], h);
            let (x0, x1, b, in_v) = sample_axis(j, flow[[1, i, j]], w);
            let (wa, wb) = (T::one() - a, T::one() - b);
            let mut gu = T::zero();
            let mut gv = T::zero();
            for bi in 0..n {
                for ch in 0..c {
                    let g = grad_out[[bi, ch, i, j]];
                    if let Some(dx) = dx.as_mut() {
                        dx[[bi, ch, y0, x0]] += g * wa * wb;
                        dx[[bi, ch, y0, x1]] += g * wa * b;
                        dx[[bi, ch, y1, x0]] += g * a * wb;
                        dx[[bi, ch, y1, x1]] += g * a * b;
                    }
                    if dflow.is_some() {
                        let (p00, p01) = (x[[bi, ch, y0, x0]], x[[bi, ch, y0, x1]]);
                        let (p10, p11) = (x[[bi, ch, y1, x0]], x[[bi, ch, y1, x1]]);
                        gu += g * (wb * (p10 - p00) + b * (p11 - p01));
                        gv += g * (wa * (p01 - p00) + a * (p11 - p10));
                    }
                }
            }
            if let Some(df) = dflow.as_mut() {
                if in_u {
                    df[[0, i, j]] = gu;
                }
                if in_v {
                    df[[1, i, j]] = gv;
                }
            }
        }
    }
    (dx, dflow)
}

pub fn bilinear_warp<T: Float>(x: &ImageBatch<T>, f: &FlowField<T>) -> Result<ImageBatch<T>> {
    let (_, h, w) = x.image_dims();
    if f.dims() != (h, w) {
        return Err(GuapError::shape((2, h, w), f.data().dim()));
    }
    // convex combination of in-range pixels keeps the [0, 1] invariant
    Ok(ImageBatch {
        data: warp_forward(x.data().view(), f.data().view()),
    })
}

/// Von Neumann offsets: up, down, left, right.
const DIRECTIONS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

#[inline]
fn neighbour(i: usize, j: usize, d: (isize, isize), h: usize, w: usize) -> (usize, usize) {
    let (qi, qj) = (i as isize + d.0, j as isize + d.1);
    if qi < 0 || qj < 0 || qi >= h as isize || qj >= w as isize {
        (i, j)
    } else {
        (qi as usize, qj as usize)
    }
}

fn direction_sums<T: Float>(flow: ArrayView3<T>) -> [f64; 4] {
    let (_, h, w) = flow.dim();
    let mut sums = [0.0f64; 4];
    for (k, &d) in DIRECTIONS.iter().enumerate() {
        let mut acc = 0.0f64;
        for i in 0..h {
            for j in 0..w {
                let (qi, qj) = neighbour(i, j, d, h, w);
                let du = (flow[[0, i, j]] - flow[[0, qi, qj]]).as_f64();
                let dv = (flow[[1, i, j]] - flow[[1, qi, qj]]).as_f64();
                acc += du * du + dv * dv;
            }
        }
        sums[k] = acc;
    }
    sums
}

fn budget_with_direction<T: Float>(flow: ArrayView3<T>) -> (f64, usize) {
    let (_, h, w) = flow.dim();
    let n = (h * w) as f64;
    let sums = direction_sums(flow);
    let (best, s) = sums
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (k, s)| if s > acc.1 { (k, s) } else { acc });
    ((s / n).sqrt(), best)
}

/// Raw-array flow budget (see module docs).
pub fn flow_budget_value<T: Float>(flow: ArrayView3<T>) -> f64 {
    budget_with_direction(flow).0
}

/// Gradient of the flow budget with respect to the flow, taken along the
/// maximizing direction. Zero when the budget is zero.
pub fn flow_budget_grad<T: Float>(flow: ArrayView3<T>) -> (f64, Array3<T>) {
    let (_, h, w) = flow.dim();
    let (budget, dir) = budget_with_direction(flow);
    let mut grad = Array3::<T>::zeros((2, h, w));
    if budget <= 0.0 {
        return (budget, grad);
    }
    // B = sqrt(S / n)  =>  dB/dS = 1 / (2 n B)
    let scale = cast::<T>(1.0 / (2.0 * (h * w) as f64 * budget));
    let two = cast::<T>(2.0);
    let d = DIRECTIONS[dir];
    for i in 0..h {
        for j in 0..w {
            let (qi, qj) = neighbour(i, j, d, h, w);
            if (qi, qj) == (i, j) {
                continue;
            }
            for k in 0..2 {
                let diff = two * (flow[[k, i, j]] - flow[[k, qi, qj]]) * scale;
                grad[[k, i, j]] += diff;
                grad[[k, qi, qj]] -= diff;
            }
        }
    }
    (budget, grad)
}

pub fn flow_budget<T: Float>(f: &FlowField<T>) -> FlowMetric {
    FlowMetric(flow_budget_value(f.data().view()))
}

/// Total-variation style smoothness loss: sum over pixels and their four
/// neighbours of the Euclidean flow difference. Diagnostic only.
pub fn flow_tv_loss<T: Float>(f: &FlowField<T>) -> FlowMetric {
    let flow = f.data();
    let (_, h, w) = flow.dim();
    let mut acc = 0.0f64;
    for i in 0..h {
        for j in 0..w {
            for &d in &DIRECTIONS {
                let (qi, qj) = neighbour(i, j, d, h, w);
                let du = (flow[[0, i, j]] - flow[[0, qi, qj]]).as_f64();
                let dv = (flow[[1, i, j]] - flow[[1, qi, qj]]).as_f64();
                acc += (du * du + dv * dv).sqrt();
            }
        }
    }
    FlowMetric(acc)
}

/// Result of rescaling a raw flow to the budget `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledFlow<T: Float = f32> {
    pub flow: FlowField<T>,
    /// Set when the raw flow had (near) zero budget and identity was returned.
    pub degenerate: bool,
}

/// Rescale `f0` so its flow budget equals `tau` exactly. A zero `tau` or a
/// degenerate (near constant) `f0` yields the identity flow.
pub fn scale_flow<T: Float>(f0: &FlowField<T>, tau: f64) -> Result<ScaledFlow<T>> {
    ensure!(tau.is_finite() && tau >= 0.0, "tau must be finite and non-negative, got {tau}");
    let (h, w) = f0.dims();
    let budget = flow_budget(f0).value();
    let degenerate = budget <= DEGENERATE_BUDGET;
    if tau == 0.0 || degenerate {
        return Ok(ScaledFlow {
            flow: FlowField::zeros(h, w),
            degenerate,
        });
    }
    let factor = cast::<T>(tau / budget);
    Ok(ScaledFlow {
        flow: FlowField {
            data: f0.data().mapv(|v| v * factor),
        },
        degenerate: false,
    })
}
