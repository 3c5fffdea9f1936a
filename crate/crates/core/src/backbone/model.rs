//! Desk-scale target classifiers behind a frozen-model interface.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, Array4, Axis, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{ensure, GuapError, Result};
use crate::nn::{Bound, Conv, Dense, ParamStore};
use crate::persist::{hex, load_tensors, save_tensors};

/// Rows per inference chunk when predicting over large batches.
const INFER_CHUNK: usize = 256;

/// A classifier the attack can differentiate through but never modifies.
pub trait TargetModel: Send + Sync {
    fn id(&self) -> &str;

    fn num_classes(&self) -> usize;

    /// `(c, h, w)` expected by [`TargetModel::forward`].
    fn input_dims(&self) -> (usize, usize, usize);

    /// Logits `(n, C)` for images `(n, c, h, w)`, with parameters held constant.
    fn forward<'g>(&self, graph: &'g Graph<f32>, x: Var<'g, f32>) -> Var<'g, f32>;

    fn param_digest(&self) -> [u8; 32];

    fn logits(&self, x: &Array4<f32>) -> Array2<f32> {
        let n = x.dim().0;
        let mut out = Array2::zeros((n, self.num_classes()));
        let mut start = 0;
        while start < n {
            let end = (start + INFER_CHUNK).min(n);
            let g = Graph::new();
            let xv = g.constant(x.slice(s![start..end, .., .., ..]).to_owned().into_dyn());
            let y = self.forward(&g, xv).value();
            let y = y.view().into_dimensionality::<Ix2>().expect("logits are (n, C)");
            out.slice_mut(s![start..end, ..]).assign(&y);
            start = end;
        }
        out
    }

    fn predict(&self, x: &Array4<f32>) -> Vec<usize> {
        argmax_rows(&self.logits(x))
    }
}

pub fn argmax_rows(logits: &Array2<f32>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                .0
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "convnet4")]
    Convnet4,
    #[serde(rename = "convnet6")]
    Convnet6,
    #[serde(rename = "resnet-tiny")]
    ResnetTiny,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Convnet4, Preset::Convnet6, Preset::ResnetTiny];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Convnet4 => "convnet4",
            Preset::Convnet6 => "convnet6",
            Preset::ResnetTiny => "resnet-tiny",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = GuapError;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| GuapError::UnknownPreset(s.to_string()))
    }
}

/// Everything needed to rebuild a classifier's wiring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub id: String,
    pub preset: Preset,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone)]
enum Layer {
    Conv(Conv),
    Relu,
    Pool,
    Residual(Conv, Conv),
    GlobalPool,
    Flatten,
    Dense(Dense),
}

/// Small CNN used as an attack target at desk scale.
#[derive(Debug, Clone)]
pub struct SmallCnn {
    spec: ModelSpec,
    layers: Vec<Layer>,
    params: ParamStore<f32>,
}

fn build_layers(spec: &ModelSpec, store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) -> Vec<Layer> {
    let (c, h, w, k) = (spec.in_channels, spec.height, spec.width, spec.num_classes);
    let mut layers = Vec::new();
    let conv = |store: &mut ParamStore<f32>, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng| {
        Conv::new(store, name, cin, cout, 3, stride, true, rng)
    };
    match spec.preset {
        Preset::Convnet4 => {
            let widths = [32, 64, 128];
            let mut cin = c;
            for (i, &cout) in widths.iter().enumerate() {
                layers.push(Layer::Conv(conv(store, &format!("conv{i}"), cin, cout, 1, rng)));
                layers.push(Layer::Relu);
                layers.push(Layer::Pool);
                cin = cout;
            }
            layers.push(Layer::Flatten);
            layers.push(Layer::Dense(Dense::new(store, "fc", cin * (h / 8) * (w / 8), k, rng)));
        }
        Preset::Convnet6 => {
            let stages: [&[usize]; 3] = [&[32, 32], &[64, 64], &[128]];
            let mut cin = c;
            let mut idx = 0;
            for stage in stages {
                for &cout in stage {
                    layers.push(Layer::Conv(conv(store, &format!("conv{idx}"), cin, cout, 1, rng)));
                    layers.push(Layer::Relu);
                    cin = cout;
                    idx += 1;
                }
                layers.push(Layer::Pool);
            }
            layers.push(Layer::Flatten);
            layers.push(Layer::Dense(Dense::new(store, "fc", cin * (h / 8) * (w / 8), k, rng)));
        }
        Preset::ResnetTiny => {
            let widths = [16, 32, 64];
            let mut cin = c;
            for (i, &cout) in widths.iter().enumerate() {
                let stride = if i == 0 { 1 } else { 2 };
                layers.push(Layer::Conv(conv(store, &format!("stem{i}"), cin, cout, stride, rng)));
                layers.push(Layer::Relu);
                let a = conv(store, &format!("res{i}.a"), cout, cout, 1, rng);
                let b = conv(store, &format!("res{i}.b"), cout, cout, 1, rng);
                layers.push(Layer::Residual(a, b));
                cin = cout;
            }
            layers.push(Layer::GlobalPool);
            layers.push(Layer::Dense(Dense::new(store, "fc", cin, k, rng)));
        }
    }
    layers
}

impl SmallCnn {
    /// Deterministically initialized, untrained classifier.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        ensure!(spec.in_channels == 1 || spec.in_channels == 3, "classifier input must have 1 or 3 channels");
        ensure!(spec.num_classes >= 2, "classifier needs at least two classes");
        ensure!(
            spec.height % 8 == 0 && spec.width % 8 == 0 && spec.height >= 8 && spec.width >= 8,
            "classifier resolution must be a multiple of 8, got {}x{}",
            spec.height,
            spec.width
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layers = build_layers(&spec, &mut params, &mut rng);
        Ok(Self { spec, layers, params })
    }

    pub fn from_params(spec: ModelSpec, params: ParamStore<f32>) -> Result<Self> {
        let mut model = Self::build(spec, 0)?;
        model
            .params
            .load_from(&params)
            .map_err(|e| GuapError::Contract(format!("checkpoint does not match {}: {e}", model.spec.preset)))?;
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn set_id(&mut self, id: impl Into<String>) {
        self.spec.id = id.into();
    }

    pub fn forward_bound<'g>(&self, p: &Bound<'g, f32>, x: Var<'g, f32>) -> Var<'g, f32> {
        let mut y = x;
        for layer in &self.layers {
            y = match layer {
                Layer::Conv(c) => c.forward(p, y),
                Layer::Relu => y.relu(),
                Layer::Pool => y.max_pool2d(2),
                Layer::Residual(a, b) => {
                    let inner = b.forward(p, a.forward(p, y).relu());
                    y.add(inner).relu()
                }
                Layer::GlobalPool => y.global_avg_pool(),
                Layer::Flatten => {
                    let shape = y.shape();
                    let n = shape[0];
                    let rest: usize = shape[1..].iter().product();
                    y.reshape(&[n, rest])
                }
                Layer::Dense(d) => d.forward(p, y),
            };
        }
        y
    }
}

impl TargetModel for SmallCnn {
    fn id(&self) -> &str {
        &self.spec.id
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn input_dims(&self) -> (usize, usize, usize) {
        (self.spec.in_channels, self.spec.height, self.spec.width)
    }

    fn forward<'g>(&self, graph: &'g Graph<f32>, x: Var<'g, f32>) -> Var<'g, f32> {
        let p = self.params.bind(graph, false);
        self.forward_bound(&p, x)
    }

    fn param_digest(&self) -> [u8; 32] {
        self.params.digest()
    }
}

pub fn build_small_cnn(preset: Preset, seed: u64, dims: (usize, usize, usize), num_classes: usize) -> Result<SmallCnn> {
    let (c, h, w) = dims;
    SmallCnn::build(
        ModelSpec {
            id: format!("{preset}-s{seed}"),
            preset,
            in_channels: c,
            height: h,
            width: w,
            num_classes,
        },
        seed,
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClassifierMeta {
    kind: String,
    spec: ModelSpec,
    param_digest: String,
}

const CLASSIFIER_KIND: &str = "classifier";

pub fn save_checkpoint(path: &Path, model: &SmallCnn) -> Result<()> {
    let meta = ClassifierMeta {
        kind: CLASSIFIER_KIND.into(),
        spec: model.spec.clone(),
        param_digest: hex(&model.param_digest()),
    };
    save_tensors(path, &meta, &model.params)
}

pub fn load_checkpoint(path: &Path) -> Result<SmallCnn> {
    let (meta, params): (ClassifierMeta, _) = load_tensors(path)?;
    if meta.kind != CLASSIFIER_KIND {
        return Err(GuapError::Malformed {
            path: path.to_path_buf(),
            detail: format!("expected a {CLASSIFIER_KIND} checkpoint, found {:?}", meta.kind),
        });
    }
    let model = SmallCnn::from_params(meta.spec, params)?;
    if hex(&model.param_digest()) != meta.param_digest {
        return Err(GuapError::Digest { path: path.to_path_buf() });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_differ() {
        assert_eq!("resnet-tiny".parse::<Preset>().unwrap(), Preset::ResnetTiny);
        assert!("vgg19".parse::<Preset>().is_err());
        let a = build_small_cnn(Preset::Convnet4, 3, (3, 32, 32), 10).unwrap();
        let b = build_small_cnn(Preset::Convnet4, 3, (3, 32, 32), 10).unwrap();
        let c = build_small_cnn(Preset::Convnet6, 3, (3, 32, 32), 10).unwrap();
        assert_eq!(a.param_digest(), b.param_digest());
        assert_ne!(a.param_digest(), c.param_digest());
    }

    #[test]
    fn logits_shape_for_every_preset() {
        let x = Array4::from_elem((5, 3, 32, 32), 0.5f32);
        for preset in Preset::ALL {
            let m = build_small_cnn(preset, 0, (3, 32, 32), 10).unwrap();
            let y = m.logits(&x);
            assert_eq!(y.dim(), (5, 10), "{preset}");
            assert!(y.iter().all(|v| v.is_finite()));
            assert_eq!(m.logits(&x), y);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = build_small_cnn(Preset::ResnetTiny, 4, (3, 16, 16), 10).unwrap();
        save_checkpoint(&path, &m).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.param_digest(), m.param_digest());
        assert_eq!(back.spec(), m.spec());
        let x = Array4::from_elem((2, 3, 16, 16), 0.25f32);
        assert_eq!(back.logits(&x), m.logits(&x));
    }

    #[test]
    fn bad_resolution_rejected() {
        assert!(build_small_cnn(Preset::Convnet4, 0, (3, 20, 20), 10).is_err());
    }
}
