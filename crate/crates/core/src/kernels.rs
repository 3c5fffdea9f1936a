//! Dense layer kernels (forward and adjoint) over NCHW arrays.
//!
//! Convolutions lower to a single GEMM per call through im2col/col2im over the
//! whole batch. Transposed convolution reuses the same geometry with the roles
//! of image and column buffer swapped.

use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4, Axis};

use crate::tensor::{cast, Float};

/// Sliding-window geometry between an "image" side `(c, h, w)` and a "grid"
/// side `(out_h, out_w)`: grid cell `(oy, ox)` with tap `(ki, kj)` reads image
/// pixel `(oy*stride - pad + ki, ox*stride - pad + kj)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn conv(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let out_h = (h + 2 * pad - k) / stride + 1;
        let out_w = (w + 2 * pad - k) / stride + 1;
        Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            out_h,
            out_w,
        }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }
}

pub fn conv_transpose_out(len: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> usize {
    (len - 1) * stride + k + out_pad - 2 * pad
}

fn im2col<T: Float>(x: &[T], n: usize, g: &ConvGeom) -> Array2<T> {
    let spatial = g.out_h * g.out_w;
    let ncols = n * spatial;
    let mut out = vec![T::zero(); g.rows() * ncols];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut out[row * ncols..(row + 1) * ncols];
                for b in 0..n {
                    let img = &x[(b * g.c + c) * g.h * g.w..(b * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &img[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let base = b * spatial + oy * g.out_w;
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[base + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((g.rows(), ncols), out).expect("im2col shape")
}

/// Adjoint of `im2col`: scatter-adds columns back into an (n, c, h, w) image.
fn col2im<T: Float>(cols: ArrayView2<T>, n: usize, g: &ConvGeom) -> Array4<T> {
    let spatial = g.out_h * g.out_w;
    let mut out = Array4::<T>::zeros((n, g.c, g.h, g.w));
    let cols = cols.as_standard_layout();
    let cols = cols.as_slice().expect("contiguous columns");
    let ncols = n * spatial;
    let dst_all = out.as_slice_mut().expect("fresh array");
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..n {
                    let img = &mut dst_all[(b * g.c + c) * g.h * g.w..(b * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = b * spatial + oy * g.out_w;
                        let drow = &mut img[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                drow[ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// (n, c, h, w) -> (c, n*h*w)
fn channels_first<T: Float>(x: ArrayView4<T>) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let p = x.permuted_axes([1, 0, 2, 3]);
    let p = p.as_standard_layout().into_owned();
    p.into_shape_with_order((c, n * h * w)).expect("reshape")
}

/// (c, n*h*w) -> (n, c, h, w)
fn batch_first<T: Float>(m: Array2<T>, n: usize, h: usize, w: usize) -> Array4<T> {
    let c = m.nrows();
    let m = m.into_shape_with_order((c, n, h, w)).expect("reshape");
    m.permuted_axes([1, 0, 2, 3]).as_standard_layout().into_owned()
}

fn add_channel_bias<T: Float>(y: &mut Array4<T>, b: ArrayView1<T>) {
    for (mut plane, &bv) in y.axis_iter_mut(Axis(1)).zip(b.iter()) {
        plane += bv;
    }
}

fn channel_sums<T: Float>(g: ArrayView4<T>) -> Array1<T> {
    g.axis_iter(Axis(1)).map(|p| p.sum()).collect()
}

fn flat4<'a, T: Float>(x: &'a ArrayView4<'_, T>) -> std::borrow::Cow<'a, [T]> {
    match x.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(x.iter().copied().collect()),
    }
}

/// Cross-correlation with zero padding; weight layout (out, in, k, k).
pub fn conv2d_forward<T: Float>(
    x: ArrayView4<T>,
    weight: ArrayView4<T>,
    bias: Option<ArrayView1<T>>,
    stride: usize,
    pad: usize,
) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let (cout, cin, k, _) = weight.dim();
    assert_eq!(c, cin, "conv2d input channels");
    let g = ConvGeom::conv(c, h, w, k, stride, pad);
    let cols = im2col(&flat4(&x), n, &g);
    let wmat = weight
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((cout, g.rows()))
        .expect("weight reshape");
    let y = wmat.dot(&cols);
    let mut y = batch_first(y, n, g.out_h, g.out_w);
    if let Some(b) = bias {
        add_channel_bias(&mut y, b);
    }
    y
}

pub struct ParamGrads<T> {
    pub dx: Option<Array4<T>>,
    pub dw: Option<Array4<T>>,
    pub db: Option<Array1<T>>,
}

pub fn conv2d_backward<T: Float>(
    x: ArrayView4<T>,
    weight: ArrayView4<T>,
    gy: ArrayView4<T>,
    stride: usize,
    pad: usize,
    need: [bool; 3],
) -> ParamGrads<T> {
    let (n, c, h, w) = x.dim();
    let (cout, _, k, _) = weight.dim();
    let g = ConvGeom::conv(c, h, w, k, stride, pad);
    let gmat = channels_first(gy);
    let dw = need[1].then(|| {
        let cols = im2col(&flat4(&x), n, &g);
        gmat.dot(&cols.t())
            .into_shape_with_order((cout, c, k, k))
            .expect("dw reshape")
    });
    let dx = need[0].then(|| {
        let wmat = weight
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((cout, g.rows()))
            .expect("weight reshape");
        let dcols = wmat.t().dot(&gmat);
        col2im(dcols.view(), n, &g)
    });
    let db = need[2].then(|| channel_sums(gy));
    ParamGrads { dx, dw, db }
}

/// Transposed convolution; weight layout (in, out, k, k).
pub fn conv_transpose2d_forward<T: Float>(
    x: ArrayView4<T>,
    weight: ArrayView4<T>,
    bias: Option<ArrayView1<T>>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Array4<T> {
    let (n, cin, h, w) = x.dim();
    let (wcin, cout, k, _) = weight.dim();
    assert_eq!(cin, wcin, "conv_transpose2d input channels");
    let g = transpose_geom(cout, h, w, k, stride, pad, out_pad);
    let xmat = channels_first(x);
    let wmat = weight
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((cin, g.rows()))
        .expect("weight reshape");
    let cols = wmat.t().dot(&xmat);
    let mut y = col2im(cols.view(), n, &g);
    if let Some(b) = bias {
        add_channel_bias(&mut y, b);
    }
    y
}

fn transpose_geom(cout: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> ConvGeom {
    ConvGeom {
        c: cout,
        h: conv_transpose_out(h, k, stride, pad, out_pad),
        w: conv_transpose_out(w, k, stride, pad, out_pad),
        k,
        stride,
        pad,
        out_h: h,
        out_w: w,
    }
}

pub fn conv_transpose2d_backward<T: Float>(
    x: ArrayView4<T>,
    weight: ArrayView4<T>,
    gy: ArrayView4<T>,
    stride: usize,
    pad: usize,
    out_pad: usize,
    need: [bool; 3],
) -> ParamGrads<T> {
    let (n, cin, h, w) = x.dim();
    let (_, cout, k, _) = weight.dim();
    let g = transpose_geom(cout, h, w, k, stride, pad, out_pad);
    let gcols = im2col(&flat4(&gy), n, &g);
    let dx = need[0].then(|| {
        let wmat = weight
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((cin, g.rows()))
            .expect("weight reshape");
        batch_first(wmat.dot(&gcols), n, h, w)
    });
    let dw = need[1].then(|| {
        channels_first(x)
            .dot(&gcols.t())
            .into_shape_with_order((cin, cout, k, k))
            .expect("dw reshape")
    });
    let db = need[2].then(|| channel_sums(gy));
    ParamGrads { dx, dw, db }
}

/// Per-instance, per-channel normalization over the spatial plane.
/// Returns the output plus (normalized input, inverse std) for the backward pass.
pub fn instance_norm_forward<T: Float>(
    x: ArrayView4<T>,
    gamma: ArrayView1<T>,
    beta: ArrayView1<T>,
    eps: T,
) -> (Array4<T>, Array4<T>, Array2<T>) {
    let (n, c, h, w) = x.dim();
    let count = cast::<T>((h * w) as f64);
    let mut xhat = Array4::<T>::zeros((n, c, h, w));
    let mut inv_std = Array2::<T>::zeros((n, c));
    let mut y = Array4::<T>::zeros((n, c, h, w));
    for b in 0..n {
        for ch in 0..c {
            let plane = x.slice(s![b, ch, .., ..]);
            let mean = plane.sum() / count;
            let var = plane.fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / count;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[[b, ch]] = istd;
            let (gm, bt) = (gamma[ch], beta[ch]);
            ndarray::Zip::from(xhat.slice_mut(s![b, ch, .., ..]))
                .and(y.slice_mut(s![b, ch, .., ..]))
                .and(plane)
                .for_each(|xh, yv, &v| {
                    *xh = (v - mean) * istd;
                    *yv = gm * *xh + bt;
                });
        }
    }
    (y, xhat, inv_std)
}

pub fn instance_norm_backward<T: Float>(
    xhat: ArrayView4<T>,
    inv_std: ArrayView2<T>,
    gamma: ArrayView1<T>,
    gy: ArrayView4<T>,
) -> (Array4<T>, Array1<T>, Array1<T>) {
    let (n, c, h, w) = xhat.dim();
    let count = cast::<T>((h * w) as f64);
    let mut dx = Array4::<T>::zeros((n, c, h, w));
    let mut dgamma = Array1::<T>::zeros(c);
    let mut dbeta = Array1::<T>::zeros(c);
    for b in 0..n {
        for ch in 0..c {
            let g = gy.slice(s![b, ch, .., ..]);
            let xh = xhat.slice(s![b, ch, .., ..]);
            let sum_g = g.sum();
            let sum_gx = ndarray::Zip::from(g).and(xh).fold(T::zero(), |a, &gv, &xv| a + gv * xv);
            dgamma[ch] += sum_gx;
            dbeta[ch] += sum_g;
            let scale = gamma[ch] * inv_std[[b, ch]] / count;
            ndarray::Zip::from(dx.slice_mut(s![b, ch, .., ..]))
                .and(g)
                .and(xh)
                .for_each(|d, &gv, &xv| {
                    *d = scale * (count * gv - sum_g - xv * sum_gx);
                });
        }
    }
    (dx, dgamma, dbeta)
}

/// Non-overlapping max pooling with window = stride = `k`. Returns the argmax
/// flat index into each input plane for the backward pass.
pub fn max_pool_forward<T: Float>(x: ArrayView4<T>, k: usize) -> (Array4<T>, Array4<usize>) {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / k, w / k);
    let mut y = Array4::<T>::zeros((n, c, oh, ow));
    let mut idx = Array4::<usize>::zeros((n, c, oh, ow));
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut at = 0;
                    for dy in 0..k {
                        for dx in 0..k {
                            let (iy, ix) = (oy * k + dy, ox * k + dx);
                            let v = x[[b, ch, iy, ix]];
                            if v > best {
                                best = v;
                                at = iy * w + ix;
                            }
                        }
                    }
                    y[[b, ch, oy, ox]] = best;
                    idx[[b, ch, oy, ox]] = at;
                }
            }
        }
    }
    (y, idx)
}

pub fn max_pool_backward<T: Float>(gy: ArrayView4<T>, idx: ArrayView4<usize>, h: usize, w: usize) -> Array4<T> {
    let (n, c, oh, ow) = gy.dim();
    let mut dx = Array4::<T>::zeros((n, c, h, w));
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let at = idx[[b, ch, oy, ox]];
                    dx[[b, ch, at / w, at % w]] += gy[[b, ch, oy, ox]];
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn direct_conv(x: &Array4<f64>, w: &Array4<f64>, stride: usize, pad: usize) -> Array4<f64> {
        let (n, c, h, wd) = x.dim();
        let (co, _, k, _) = w.dim();
        let g = ConvGeom::conv(c, h, wd, k, stride, pad);
        let mut y = Array4::zeros((n, co, g.out_h, g.out_w));
        for b in 0..n {
            for o in 0..co {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x[[b, ci, iy as usize, ix as usize]] * w[[o, ci, ki, kj]];
                                    }
                                }
                            }
                        }
                        y[[b, o, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    fn seq(shape: (usize, usize, usize, usize), scale: f64) -> Array4<f64> {
        let total = shape.0 * shape.1 * shape.2 * shape.3;
        Array::from_iter((0..total).map(|i| ((i * 37 % 17) as f64 - 8.0) * scale))
            .into_shape_with_order(shape)
            .unwrap()
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = seq((2, 3, 7, 6), 0.1);
        let w = seq((4, 3, 3, 3), 0.05);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let fast = conv2d_forward(x.view(), w.view(), None, stride, pad);
            let slow = direct_conv(&x, &w, stride, pad);
            assert_eq!(fast.dim(), slow.dim());
            let err = (&fast - &slow).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(err < 1e-12, "stride {stride} pad {pad}: {err}");
        }
    }

    #[test]
    fn transpose_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> with the same weights.
        let x = seq((2, 3, 8, 8), 0.1);
        let w = seq((5, 3, 3, 3), 0.07);
        let y = conv2d_forward(x.view(), w.view(), None, 2, 1);
        let probe = seq(y.dim().into(), 0.03);
        // conv weight (out,in,k,k) is convT weight (in=out_conv, out=in_conv, k, k)
        let back = conv_transpose2d_forward(probe.view(), w.view(), None, 2, 1, 1);
        assert_eq!(back.dim(), x.dim());
        let lhs: f64 = (&y * &probe).sum();
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn transpose_output_size_doubles_with_output_padding() {
        assert_eq!(conv_transpose_out(8, 3, 2, 1, 1), 16);
        assert_eq!(conv_transpose_out(16, 3, 1, 1, 0), 16);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = seq((1, 2, 4, 4), 1.0);
        let (y, idx) = max_pool_forward(x.view(), 2);
        let g = Array4::<f64>::ones(y.dim());
        let dx = max_pool_backward(g.view(), idx.view(), 4, 4);
        assert_eq!(dx.sum(), y.len() as f64);
        for ((b, c, oy, ox), &v) in y.indexed_iter() {
            let at = idx[[b, c, oy, ox]];
            assert_eq!(x[[b, c, at / 4, at % 4]], v);
        }
    }
}
