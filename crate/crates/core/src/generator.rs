//! Encoder / residual bottleneck / dual-decoder network that turns a fixed
//! random pattern into a raw noise field and a raw flow field.
//!
//! Layout for an input of `c x h x w` and base width `b`:
//!
//! ```text
//! z -> conv3x3/1 (b)  -> conv3x3/2 (2b) -> conv3x3/2 (4b)      each + IN + ReLU
//!   -> residual blocks on 4b (conv-IN-ReLU-conv-IN, identity skip)
//!   -> noise decoder: deconv/2 (2b) -> deconv/2 (b) -> deconv3x3/1 (c) -> tanh
//!   -> flow decoder:  deconv/2 (2b) -> deconv/2 (b) -> deconv3x3/1 (2) -> sigmoid
//! ```
//!
//! Instance normalization makes the network well defined for a single input.
//! The sigmoid flow output is remapped to `(-1, 1)` by `2s - 1` unless the
//! verbatim `[0, 1]` range is requested.

use ndarray::{Array3, ArrayD, Ix3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{ensure, GuapError, Result};
use crate::flowwarp::FlowField;
use crate::nn::{Bound, Conv, ConvTranspose, InstanceNorm, ParamStore};
use crate::perturb::NoiseField;
use crate::tensor::{all_finite, cast, Float};

/// How the flow head's sigmoid output is mapped before budget scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FlowRange {
    /// `2 * sigmoid - 1`, so both displacement directions are reachable.
    #[default]
    Signed,
    /// Raw sigmoid output in `(0, 1)`.
    Unit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub in_channels: usize,
    pub base_width: usize,
    pub num_resnet_blocks: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub flow_range: FlowRange,
}

impl GeneratorArch {
    pub fn new(in_channels: usize, height: usize, width: usize) -> Self {
        Self {
            in_channels,
            base_width: 64,
            num_resnet_blocks: 2,
            height,
            width,
            flow_range: FlowRange::Signed,
        }
    }

    pub fn with_base_width(mut self, base_width: usize) -> Self {
        self.base_width = base_width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.in_channels == 1 || self.in_channels == 3,
            "generator input must have 1 or 3 channels, got {}",
            self.in_channels
        );
        ensure!(self.base_width >= 8, "base_width must be at least 8, got {}", self.base_width);
        ensure!(self.num_resnet_blocks >= 1, "at least one residual block is required");
        ensure!(
            self.height >= 4 && self.width >= 4 && self.height % 4 == 0 && self.width % 4 == 0,
            "generator resolution must be divisible by 4, got {}x{}",
            self.height,
            self.width
        );
        Ok(())
    }
}

/// Standard-normal input pattern `z` of image shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedPattern<T: Float = f32> {
    pub data: Array3<T>,
    pub seed: u64,
}

impl<T: Float> SeedPattern<T> {
    pub fn sample(c: usize, h: usize, w: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_simple_fn((c, h, w), || {
            let v: f64 = StandardNormal.sample(&mut rng);
            cast::<T>(v)
        });
        Self { data, seed }
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for v in self.data.iter() {
            h.update((v.as_f64() as f32).to_le_bytes());
        }
        h.finalize().into()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvBlock {
    conv: Conv,
    norm: InstanceNorm,
}

#[derive(Debug, Clone, Copy)]
struct DeconvBlock {
    deconv: ConvTranspose,
    norm: InstanceNorm,
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    a: ConvBlock,
    b: ConvBlock,
}

#[derive(Debug, Clone)]
struct Decoder {
    up: [DeconvBlock; 2],
    head: ConvTranspose,
}

/// Layer wiring; parameter values live in the paired [`ParamStore`].
#[derive(Debug, Clone)]
struct Layout {
    encoder: [ConvBlock; 3],
    blocks: Vec<ResBlock>,
    noise: Decoder,
    flow: Decoder,
}

/// Trainable generator: architecture, wiring and weights.
#[derive(Debug, Clone)]
pub struct Generator<T: Float = f32> {
    arch: GeneratorArch,
    layout: Layout,
    params: ParamStore<T>,
}

/// Raw generator outputs before budget scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPerturbation<T: Float = f32> {
    /// Values in `(-1, 1)`.
    pub delta0: NoiseField<T>,
    /// Values in `(-1, 1)` (signed range) or `(0, 1)` (unit range).
    pub flow0: FlowField<T>,
}

fn conv_block<T: Float>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> ConvBlock {
    ConvBlock {
        conv: Conv::new(store, &format!("{name}.conv"), cin, cout, 3, stride, false, rng),
        norm: InstanceNorm::new(store, &format!("{name}.norm"), cout),
    }
}

fn decoder<T: Float>(store: &mut ParamStore<T>, name: &str, base: usize, out: usize, rng: &mut ChaCha8Rng) -> Decoder {
    let up = |store: &mut ParamStore<T>, i: usize, cin: usize, cout: usize, rng: &mut ChaCha8Rng| DeconvBlock {
        deconv: ConvTranspose::new(store, &format!("{name}.up{i}.deconv"), cin, cout, 3, 2, false, rng),
        norm: InstanceNorm::new(store, &format!("{name}.up{i}.norm"), cout),
    };
    let up0 = up(store, 0, 4 * base, 2 * base, rng);
    let up1 = up(store, 1, 2 * base, base, rng);
    let head = ConvTranspose::new(store, &format!("{name}.head"), base, out, 3, 1, true, rng);
    Decoder { up: [up0, up1], head }
}

fn build_layout<T: Float>(arch: &GeneratorArch, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Layout {
    let b = arch.base_width;
    let encoder = [
        conv_block(store, "enc0", arch.in_channels, b, 1, rng),
        conv_block(store, "enc1", b, 2 * b, 2, rng),
        conv_block(store, "enc2", 2 * b, 4 * b, 2, rng),
    ];
    let blocks = (0..arch.num_resnet_blocks)
        .map(|i| ResBlock {
            a: conv_block(store, &format!("res{i}.a"), 4 * b, 4 * b, 1, rng),
            b: conv_block(store, &format!("res{i}.b"), 4 * b, 4 * b, 1, rng),
        })
        .collect();
    let noise = decoder(store, "noise", b, arch.in_channels, rng);
    let flow = decoder(store, "flow", b, 2, rng);
    Layout {
        encoder,
        blocks,
        noise,
        flow,
    }
}

impl ConvBlock {
    fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>, relu: bool) -> Var<'g, T> {
        let y = self.norm.forward(p, self.conv.forward(p, x));
        if relu {
            y.relu()
        } else {
            y
        }
    }
}

impl Decoder {
    fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let mut y = x;
        for blk in &self.up {
            y = blk.norm.forward(p, blk.deconv.forward(p, y)).relu();
        }
        self.head.forward(p, y)
    }
}

impl<T: Float> Generator<T> {
    /// Deterministic initialization from `seed`.
    pub fn init(arch: GeneratorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layout = build_layout(&arch, &mut params, &mut rng);
        Ok(Self { arch, layout, params })
    }

    /// Rebuild from stored weights; names and shapes must match `arch`.
    pub fn from_params(arch: GeneratorArch, params: ParamStore<T>) -> Result<Self> {
        let mut g = Self::init(arch, 0)?;
        g.params
            .load_from(&params)
            .map_err(|e| GuapError::Contract(format!("generator weights do not match architecture: {e}")))?;
        Ok(g)
    }

    pub fn arch(&self) -> &GeneratorArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn convert<D: Float>(&self) -> Generator<D> {
        Generator {
            arch: self.arch,
            layout: self.layout.clone(),
            params: self.params.convert(),
        }
    }

    /// Graph forward pass on `z` of shape `(c, h, w)`; returns `(delta0, flow0)`
    /// nodes of shapes `(c, h, w)` and `(2, h, w)`.
    pub fn forward_graph<'g>(&self, p: &Bound<'g, T>, z: Var<'g, T>) -> (Var<'g, T>, Var<'g, T>) {
        let (c, h, w) = (self.arch.in_channels, self.arch.height, self.arch.width);
        let mut x = z.reshape(&[1, c, h, w]);
        for blk in &self.layout.encoder {
            x = blk.forward(p, x, true);
        }
        for res in &self.layout.blocks {
            let y = res.b.forward(p, res.a.forward(p, x, true), false);
            x = x.add(y);
        }
        let delta0 = self.layout.noise.forward(p, x).tanh().reshape(&[c, h, w]);
        let flow = self.layout.flow.forward(p, x).sigmoid();
        let flow = match self.arch.flow_range {
            FlowRange::Signed => flow.affine(cast(2.0), cast(-1.0)),
            FlowRange::Unit => flow,
        };
        (delta0, flow.reshape(&[2, h, w]))
    }

    pub fn forward(&self, z: &SeedPattern<T>) -> Result<RawPerturbation<T>> {
        let (c, h, w) = (self.arch.in_channels, self.arch.height, self.arch.width);
        if z.data.dim() != (c, h, w) {
            return Err(GuapError::shape((c, h, w), z.data.dim()));
        }
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let (d, f) = self.forward_graph(&p, g.constant(z.data.clone().into_dyn()));
        let (d, f) = (d.value(), f.value());
        if !all_finite(&d) || !all_finite(&f) {
            return Err(GuapError::NonFinite {
                stage: "generator forward".into(),
                detail: "output contains NaN or infinity".into(),
            });
        }
        Ok(RawPerturbation {
            delta0: NoiseField::new(to3(&d))?,
            flow0: FlowField::new(to3(&f))?,
        })
    }

    /// Zero the flow head so its sigmoid outputs exactly 0.5 everywhere.
    pub fn zero_flow_head(&mut self) {
        let head = self.layout.flow.head;
        self.params.get_mut(head.weight).fill(T::zero());
        if let Some(b) = head.bias {
            self.params.get_mut(b).fill(T::zero());
        }
    }
}

fn to3<T: Float>(a: &ArrayD<T>) -> Array3<T> {
    a.clone().into_dimensionality::<Ix3>().expect("rank-3 output")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowwarp::scale_flow;

    fn small(h: usize, w: usize) -> GeneratorArch {
        GeneratorArch::new(3, h, w).with_base_width(8)
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Generator::<f32>::init(small(16, 16), 7).unwrap();
        let b = Generator::<f32>::init(small(16, 16), 7).unwrap();
        let c = Generator::<f32>::init(small(16, 16), 8).unwrap();
        assert_eq!(a.params().digest(), b.params().digest());
        assert_ne!(a.params().digest(), c.params().digest());
    }

    #[test]
    fn output_shapes_and_ranges() {
        for (h, w) in [(32, 32), (64, 64), (16, 8)] {
            let g = Generator::<f32>::init(small(h, w), 1).unwrap();
            let z = SeedPattern::sample(3, h, w, 3);
            let out = g.forward(&z).unwrap();
            assert_eq!(out.delta0.data().dim(), (3, h, w));
            assert_eq!(out.flow0.data().dim(), (2, h, w));
            assert!(out.delta0.data().iter().all(|v| v.abs() < 1.0));
            assert!(out.flow0.data().iter().all(|v| v.abs() < 1.0));
            assert_eq!(g.forward(&z).unwrap(), out);
        }
    }

    #[test]
    fn unit_range_flow_is_positive() {
        let mut arch = small(16, 16);
        arch.flow_range = FlowRange::Unit;
        let g = Generator::<f32>::init(arch, 1).unwrap();
        let out = g.forward(&SeedPattern::sample(3, 16, 16, 0)).unwrap();
        assert!(out.flow0.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_flow_head_gives_degenerate_identity() {
        let mut g = Generator::<f32>::init(small(16, 16), 1).unwrap();
        g.zero_flow_head();
        let out = g.forward(&SeedPattern::sample(3, 16, 16, 0)).unwrap();
        assert!(out.flow0.data().iter().all(|&v| v == 0.0));
        let scaled = scale_flow(&out.flow0, 0.1).unwrap();
        assert!(scaled.degenerate && scaled.flow.is_identity());
    }

    #[test]
    fn invalid_arch_is_rejected() {
        assert!(Generator::<f32>::init(small(18, 16), 0).is_err());
        assert!(Generator::<f32>::init(GeneratorArch::new(3, 16, 16).with_base_width(4), 0).is_err());
        let mut a = small(16, 16);
        a.num_resnet_blocks = 0;
        assert!(Generator::<f32>::init(a, 0).is_err());
        let g = Generator::<f32>::init(small(16, 16), 0).unwrap();
        assert!(g.forward(&SeedPattern::sample(3, 8, 8, 0)).is_err());
    }
}
