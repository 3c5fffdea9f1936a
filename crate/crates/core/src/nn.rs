//! Named parameter storage, layer wrappers and the Adam optimizer.

use ndarray::{Array, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, Var};
use crate::tensor::{cast, Float};

/// Ordered collection of named weight tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Float> {
    names: Vec<String>,
    tensors: Vec<ArrayD<T>>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: ArrayD<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&ArrayD<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Replace tensor values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<(), String> {
        if self.names != other.names {
            return Err("parameter names differ".into());
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(format!("shape {:?} != {:?}", dst.shape(), src.shape()));
            }
            dst.assign(src);
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian f32 values.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u32).to_le_bytes());
            }
            for v in t.iter() {
                h.update((v.as_f64() as f32).to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Place every parameter on `graph`, as gradient leaves or as constants.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { graph.leaf(t.clone()) } else { graph.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    pub fn convert<D: Float>(&self) -> ParamStore<D> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(crate::tensor::convert).collect(),
        }
    }
}

/// Parameters placed on a particular graph.
pub struct Bound<'g, T: Float> {
    vars: Vec<Var<'g, T>>,
}

impl<'g, T: Float> Bound<'g, T> {
    pub fn var(&self, id: ParamId) -> Var<'g, T> {
        self.vars[id.0]
    }

    /// Gradients for every parameter, in store order (zeros where unused).
    pub fn gradients(&self, grads: &mut Gradients<T>) -> Vec<ArrayD<T>> {
        self.vars
            .iter()
            .map(|&v| grads.take(v).unwrap_or_else(|| ArrayD::zeros(IxDyn(&v.shape()))))
            .collect()
    }
}

/// He-uniform weights for a layer with `fan_in` inputs.
pub fn he_uniform<T: Float, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    Array::from_shape_simple_fn(IxDyn(shape), || cast::<T>(dist.sample(rng)))
}

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), he_uniform(&[cout, cin, k, k], cin * k * k, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout]))));
        Self {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv2d(p.var(self.weight), self.bias.map(|b| p.var(b)), self.stride, self.pad)
    }
}

/// Transposed convolution; stride 2 doubles the spatial size.
#[derive(Debug, Clone, Copy)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTranspose {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), he_uniform(&[cin, cout, k, k], cin * k * k / (stride * stride), rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout]))));
        Self {
            weight,
            bias,
            stride,
            pad: k / 2,
            out_pad: stride - 1,
        }
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv_transpose2d(p.var(self.weight), self.bias.map(|b| p.var(b)), self.stride, self.pad, self.out_pad)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl InstanceNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[channels]), T::one())),
            beta: store.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels]))),
        }
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.instance_norm(p.var(self.gamma), p.var(self.beta), cast(Self::EPS))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        // Glorot-style scale for the logit layer
        let bound = (6.0 / (din + dout) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let w = Array::from_shape_simple_fn(IxDyn(&[dout, din]), || cast::<T>(dist.sample(rng)));
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[dout]))),
        }
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.linear(p.var(self.weight), p.var(self.bias))
    }
}

/// Adaptive-moment optimizer with bias correction and optional decoupled decay.
#[derive(Debug, Clone)]
pub struct Adam<T: Float> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[ArrayD<T>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = params.tensors.iter().map(|t| ArrayD::zeros(t.raw_dim())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cast::<T>(self.beta1), cast::<T>(self.beta2));
        let c1 = cast::<T>(1.0 - self.beta1.powi(t));
        let c2 = cast::<T>(1.0 - self.beta2.powi(t));
        let lr = cast::<T>(self.lr);
        let eps = cast::<T>(self.eps);
        let decay = cast::<T>(self.lr * self.weight_decay);
        for (((p, g), m), v) in params.tensors.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps) + decay * *p;
            });
        }
    }
}
