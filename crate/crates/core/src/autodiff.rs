//! Minimal tape-based reverse-mode differentiation over `ndarray` values.
//!
//! A [`Graph`] records every operation as a node holding its forward value and
//! a closure mapping the upstream gradient to per-parent gradients. Nodes that
//! do not depend on any gradient-requiring leaf carry no closure, so frozen
//! weights cost nothing on the way back.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{Array, ArrayD, Axis, Ix0, Ix1, Ix2, Ix3, Ix4, IxDyn, Zip};

use crate::flowwarp::{flow_budget_grad, warp_backward, warp_forward};
use crate::kernels;
use crate::tensor::{cast, Float};

type Backward<T> = Box<dyn Fn(&ArrayD<T>, &[bool]) -> Vec<Option<ArrayD<T>>>>;

struct Node<T: Float> {
    value: Rc<ArrayD<T>>,
    parents: Vec<usize>,
    backward: Option<Backward<T>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
}

#[derive(Clone, Copy)]
pub struct Var<'g, T: Float> {
    graph: &'g Graph<T>,
    id: usize,
}

pub struct Gradients<T: Float> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&ArrayD<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<ArrayD<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

fn d4<T: Float>(a: &ArrayD<T>) -> ndarray::ArrayView4<'_, T> {
    a.view().into_dimensionality::<Ix4>().expect("rank-4 tensor")
}

fn d3<T: Float>(a: &ArrayD<T>) -> ndarray::ArrayView3<'_, T> {
    a.view().into_dimensionality::<Ix3>().expect("rank-3 tensor")
}

fn d2<T: Float>(a: &ArrayD<T>) -> ndarray::ArrayView2<'_, T> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

fn d1<T: Float>(a: &ArrayD<T>) -> ndarray::ArrayView1<'_, T> {
    a.view().into_dimensionality::<Ix1>().expect("rank-1 tensor")
}

fn scalar_of<T: Float>(a: &ArrayD<T>) -> T {
    *a.iter().next().expect("scalar tensor")
}

fn scalar<T: Float>(v: T) -> ArrayD<T> {
    Array::from_elem(IxDyn(&[]), v)
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: ArrayD<T>, parents: &[Var<'_, T>], backward: Backward<T>) -> Var<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var { graph: self, id }
    }

    fn leaf_node(&self, value: ArrayD<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var { graph: self, id }
    }

    /// A value the loss is not differentiated against.
    pub fn constant(&self, value: ArrayD<T>) -> Var<'_, T> {
        self.leaf_node(value, false)
    }

    /// A value whose gradient will be reported by [`Graph::backward`].
    pub fn leaf(&self, value: ArrayD<T>) -> Var<'_, T> {
        self.leaf_node(value, true)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<ArrayD<T>>> = (0..nodes.len()).map(|_| None).collect();
        let loss_node = &nodes[loss.id];
        assert_eq!(loss_node.value.len(), 1, "backward expects a scalar loss");
        grads[loss.id] = Some(ArrayD::from_elem(loss_node.value.raw_dim(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let need: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &need);
            grads[id] = Some(g);
            for ((&p, pg), &needed) in node.parents.iter().zip(parent_grads).zip(&need) {
                let Some(pg) = pg else { continue };
                if !needed {
                    continue;
                }
                match grads[p].as_mut() {
                    Some(acc) => *acc += &pg,
                    None => grads[p] = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

impl<'g, T: Float> Var<'g, T> {
    pub fn value(&self) -> Rc<ArrayD<T>> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub fn scalar_value(&self) -> T {
        scalar_of(&self.value())
    }

    fn unary(self, value: ArrayD<T>, backward: Backward<T>) -> Var<'g, T> {
        self.graph.push(value, &[self], backward)
    }

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        let y = &*a + &*b;
        self.graph.push(y, &[self, other], Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    /// `x (n, ...) + d (...)`, with `d` broadcast over the leading batch axis.
    pub fn add_broadcast_batch(self, d: Var<'g, T>) -> Var<'g, T> {
        let (x, dv) = (self.value(), d.value());
        assert_eq!(&x.shape()[1..], dv.shape(), "add_broadcast_batch: shape mismatch");
        let y = &*x + &*dv;
        self.graph.push(
            y,
            &[self, d],
            Box::new(|g, need| {
                let gd = need[1].then(|| g.sum_axis(Axis(0)));
                vec![Some(g.clone()), gd]
            }),
        )
    }

    pub fn mul_scalar(self, s: T) -> Var<'g, T> {
        self.affine(s, T::zero())
    }

    /// `scale * x + shift`
    pub fn affine(self, scale: T, shift: T) -> Var<'g, T> {
        let y = self.value().mapv(|v| scale * v + shift);
        self.unary(y, Box::new(move |g, _| vec![Some(g.mapv(|v| v * scale))]))
    }

    /// Multiply every element by the scalar node `s`.
    pub fn scale_by(self, s: Var<'g, T>) -> Var<'g, T> {
        let (x, sv) = (self.value(), s.value());
        let sc = scalar_of(&sv);
        let y = x.mapv(|v| v * sc);
        self.graph.push(
            y,
            &[self, s],
            Box::new(move |g, need| {
                let gx = need[0].then(|| g.mapv(|v| v * sc));
                let gs = need[1].then(|| scalar(Zip::from(g).and(&*x).fold(T::zero(), |a, &gv, &xv| a + gv * xv)));
                vec![gx, gs]
            }),
        )
    }

    /// `c / s` for a scalar node.
    pub fn recip_scaled(self, c: T) -> Var<'g, T> {
        let s = self.scalar_value();
        self.unary(
            scalar(c / s),
            Box::new(move |g, _| vec![Some(scalar(-scalar_of(g) * c / (s * s)))]),
        )
    }

    pub fn relu(self) -> Var<'g, T> {
        let x = self.value();
        let y = x.mapv(|v| v.max(T::zero()));
        self.unary(
            y,
            Box::new(move |g, _| {
                let mut out = g.clone();
                Zip::from(&mut out).and(&*x).for_each(|o, &v| {
                    if v <= T::zero() {
                        *o = T::zero();
                    }
                });
                vec![Some(out)]
            }),
        )
    }

    pub fn tanh(self) -> Var<'g, T> {
        let y = Rc::new(self.value().mapv(|v| v.tanh()));
        let yc = y.clone();
        self.unary(
            (*y).clone(),
            Box::new(move |g, _| {
                let mut out = g.clone();
                Zip::from(&mut out).and(&*yc).for_each(|o, &t| *o = *o * (T::one() - t * t));
                vec![Some(out)]
            }),
        )
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        let y = Rc::new(self.value().mapv(|v| T::one() / (T::one() + (-v).exp())));
        let yc = y.clone();
        self.unary(
            (*y).clone(),
            Box::new(move |g, _| {
                let mut out = g.clone();
                Zip::from(&mut out).and(&*yc).for_each(|o, &s| *o = *o * s * (T::one() - s));
                vec![Some(out)]
            }),
        )
    }

    /// Saturating clamp: gradient is zero where the input was outside `[lo, hi]`.
    pub fn clamp(self, lo: T, hi: T) -> Var<'g, T> {
        let x = self.value();
        let y = x.mapv(|v| v.max(lo).min(hi));
        self.unary(
            y,
            Box::new(move |g, _| {
                let mut out = g.clone();
                Zip::from(&mut out).and(&*x).for_each(|o, &v| {
                    if v < lo || v > hi {
                        *o = T::zero();
                    }
                });
                vec![Some(out)]
            }),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let orig = x.shape().to_vec();
        let y = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.unary(
            y,
            Box::new(move |g, _| {
                vec![Some(
                    g.as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(IxDyn(&orig))
                        .expect("reshape back"),
                )]
            }),
        )
    }

    pub fn conv2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, stride: usize, pad: usize) -> Var<'g, T> {
        let (x, w) = (self.value(), weight.value());
        let b = bias.map(|b| b.value());
        let y = kernels::conv2d_forward(d4(&x), d4(&w), b.as_deref().map(d1), stride, pad).into_dyn();
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.graph.push(
            y,
            &parents,
            Box::new(move |g, need| {
                let has_bias = need.len() == 3;
                let pg = kernels::conv2d_backward(
                    d4(&x),
                    d4(&w),
                    d4(g),
                    stride,
                    pad,
                    [need[0], need[1], has_bias && need[2]],
                );
                let mut out = vec![pg.dx.map(|a| a.into_dyn()), pg.dw.map(|a| a.into_dyn())];
                if has_bias {
                    out.push(pg.db.map(|a| a.into_dyn()));
                }
                out
            }),
        )
    }

    pub fn conv_transpose2d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var<'g, T> {
        let (x, w) = (self.value(), weight.value());
        let b = bias.map(|b| b.value());
        let y = kernels::conv_transpose2d_forward(d4(&x), d4(&w), b.as_deref().map(d1), stride, pad, out_pad)
            .into_dyn();
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.graph.push(
            y,
            &parents,
            Box::new(move |g, need| {
                let has_bias = need.len() == 3;
                let pg = kernels::conv_transpose2d_backward(
                    d4(&x),
                    d4(&w),
                    d4(g),
                    stride,
                    pad,
                    out_pad,
                    [need[0], need[1], has_bias && need[2]],
                );
                let mut out = vec![pg.dx.map(|a| a.into_dyn()), pg.dw.map(|a| a.into_dyn())];
                if has_bias {
                    out.push(pg.db.map(|a| a.into_dyn()));
                }
                out
            }),
        )
    }

    pub fn instance_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: T) -> Var<'g, T> {
        let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
        let (y, xhat, inv_std) = kernels::instance_norm_forward(d4(&x), d1(&gm), d1(&bt), eps);
        self.graph.push(
            y.into_dyn(),
            &[self, gamma, beta],
            Box::new(move |g, _| {
                let (dx, dg, db) = kernels::instance_norm_backward(xhat.view(), inv_std.view(), d1(&gm), d4(g));
                vec![Some(dx.into_dyn()), Some(dg.into_dyn()), Some(db.into_dyn())]
            }),
        )
    }

    pub fn max_pool2d(self, k: usize) -> Var<'g, T> {
        let x = self.value();
        let (_, _, h, w) = d4(&x).dim();
        let (y, idx) = kernels::max_pool_forward(d4(&x), k);
        self.unary(
            y.into_dyn(),
            Box::new(move |g, _| vec![Some(kernels::max_pool_backward(d4(g), idx.view(), h, w).into_dyn())]),
        )
    }

    /// (n, c, h, w) -> (n, c)
    pub fn global_avg_pool(self) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = d4(&x).dim();
        let area = cast::<T>((h * w) as f64);
        let y = x
            .view()
            .into_shape_with_order((n, c, h * w))
            .map(|v| v.sum_axis(Axis(2)).mapv(|s| s / area))
            .unwrap_or_else(|_| {
                let xs = x.as_standard_layout().into_owned();
                xs.into_shape_with_order((n, c, h * w)).unwrap().sum_axis(Axis(2)).mapv(|s| s / area)
            });
        self.unary(
            y.into_dyn(),
            Box::new(move |g, _| {
                let g2 = d2(g);
                let out = Array::from_shape_fn((n, c, h, w), |(b, ch, _, _)| g2[[b, ch]] / area);
                vec![Some(out.into_dyn())]
            }),
        )
    }

    /// `x (n, in) @ w^T (in, out) + b`
    pub fn linear(self, weight: Var<'g, T>, bias: Var<'g, T>) -> Var<'g, T> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let y = d2(&x).dot(&d2(&w).t()) + &d1(&b);
        self.graph.push(
            y.into_dyn(),
            &[self, weight, bias],
            Box::new(move |g, need| {
                let g2 = d2(g);
                let gx = need[0].then(|| g2.dot(&d2(&w)).into_dyn());
                let gw = need[1].then(|| g2.t().dot(&d2(&x)).into_dyn());
                let gb = need[2].then(|| g2.sum_axis(Axis(0)).into_dyn());
                vec![gx, gw, gb]
            }),
        )
    }

    /// Bilinear warp of an image batch by a `(2, h, w)` flow node.
    pub fn warp(self, flow: Var<'g, T>) -> Var<'g, T> {
        let (x, f) = (self.value(), flow.value());
        let y = warp_forward(d4(&x), d3(&f)).into_dyn();
        self.graph.push(
            y,
            &[self, flow],
            Box::new(move |g, need| {
                let (dx, df) = warp_backward(d4(&x), d3(&f), d4(g), need[0], need[1]);
                vec![dx.map(|a| a.into_dyn()), df.map(|a| a.into_dyn())]
            }),
        )
    }

    /// Scalar flow budget of a `(2, h, w)` flow node.
    pub fn flow_budget(self) -> Var<'g, T> {
        let f = self.value();
        let (value, grad) = flow_budget_grad(d3(&f));
        self.unary(
            scalar(cast(value)),
            Box::new(move |g, _| {
                let s = scalar_of(g);
                vec![Some(grad.mapv(|v| v * s).into_dyn())]
            }),
        )
    }

    /// Scalar l-infinity norm; the gradient flows to the first maximizing element.
    pub fn linf(self) -> Var<'g, T> {
        let x = self.value();
        let (at, m) = x
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |acc, (i, &v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc });
        let sign = x.iter().nth(at).map(|v| v.signum()).unwrap_or(T::zero());
        let shape = x.raw_dim();
        self.unary(
            scalar(m),
            Box::new(move |g, _| {
                let mut out = ArrayD::<T>::zeros(shape.clone());
                if let Some(slot) = out.iter_mut().nth(at) {
                    *slot = scalar_of(g) * sign;
                }
                vec![Some(out)]
            }),
        )
    }

    /// Per-sample cross-entropy of `(n, C)` logits against integer labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Var<'g, T> {
        let z = self.value();
        let z2 = d2(&z);
        let (n, classes) = z2.dim();
        assert_eq!(labels.len(), n, "cross_entropy: label count");
        let mut probs = ndarray::Array2::<T>::zeros((n, classes));
        let mut loss = ndarray::Array1::<T>::zeros(n);
        for (i, row) in z2.outer_iter().enumerate() {
            let m = row.fold(T::neg_infinity(), |a, &v| a.max(v));
            let sum: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + sum.ln();
            for (k, &v) in row.iter().enumerate() {
                probs[[i, k]] = (v - lse).exp();
            }
            loss[i] = (lse - row[labels[i]]).max(T::zero());
        }
        let labels = labels.to_vec();
        self.unary(
            loss.into_dyn(),
            Box::new(move |g, _| {
                let g1 = d1(g);
                let mut out = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    out[[i, y]] -= T::one();
                    let gi = g1[i];
                    out.row_mut(i).mapv_inplace(|v| v * gi);
                }
                vec![Some(out.into_dyn())]
            }),
        )
    }

    /// Elementwise `ln(1 + x)`.
    pub fn ln_1p(self) -> Var<'g, T> {
        let x = self.value();
        let y = x.mapv(|v| v.ln_1p());
        self.unary(
            y,
            Box::new(move |g, _| {
                let mut out = g.clone();
                Zip::from(&mut out).and(&*x).for_each(|o, &v| *o = *o / (T::one() + v));
                vec![Some(out)]
            }),
        )
    }

    pub fn mean(self) -> Var<'g, T> {
        let x = self.value();
        let count = cast::<T>(x.len() as f64);
        let shape = x.raw_dim();
        self.unary(
            scalar(x.sum() / count),
            Box::new(move |g, _| vec![Some(ArrayD::from_elem(shape.clone(), scalar_of(g) / count))]),
        )
    }

    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.raw_dim();
        self.unary(
            scalar(x.sum()),
            Box::new(move |g, _| vec![Some(ArrayD::from_elem(shape.clone(), scalar_of(g)))]),
        )
    }
}

/// Extract a 0-d value as a plain number.
pub fn to_scalar<T: Float>(a: &ArrayD<T>) -> T {
    a.view()
        .into_dimensionality::<Ix0>()
        .map(|v| v.into_scalar().to_owned())
        .unwrap_or_else(|_| scalar_of(a))
}
