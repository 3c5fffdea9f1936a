//! Labeled image datasets, CIFAR-10 binary batches, PNG folders and
//! supervised training of the target classifiers.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use log::{info, warn};
use ndarray::{s, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{SmallCnn, TargetModel};
use crate::autodiff::Graph;
use crate::error::{ensure, GuapError, Result};
use crate::flowwarp::ImageBatch;
use crate::nn::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    HeldOut,
}

/// Images with one class label each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: ImageBatch,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl LabeledDataset {
    pub fn new(images: ImageBatch, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        ensure!(
            labels.len() == images.len(),
            "{} images but {} labels",
            images.len(),
            labels.len()
        );
        ensure!(num_classes >= 1, "dataset needs at least one class");
        ensure!(
            labels.iter().all(|&y| y < num_classes),
            "labels must lie in [0, {num_classes})"
        );
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn images(&self) -> &ImageBatch {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        self.images.image_dims()
    }

    /// The first `n` samples; prefixes of one dataset are nested.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        ensure!(n >= 1 && n <= self.len(), "prefix of {n} from a dataset of {}", self.len());
        self.select(&(0..n).collect::<Vec<_>>())
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        ensure!(!indices.is_empty(), "selection must be non-empty");
        ensure!(indices.iter().all(|&i| i < self.len()), "selection index out of range");
        let (images, labels) = self.gather(indices);
        Self::new(ImageBatch::new(images)?, labels, self.num_classes, self.split)
    }

    /// Copies of the selected images and labels.
    pub fn gather(&self, indices: &[usize]) -> (Array4<f32>, Vec<usize>) {
        let images = self.images.data().select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (images, labels)
    }

    /// Minibatch index lists covering the dataset once. `shuffle_seed` of `None`
    /// keeps the stored order.
    pub fn batch_indices(&self, batch: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = shuffle_seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// SHA-256 of each image's little-endian f32 pixels.
    pub fn image_digests(&self) -> Vec<[u8; 32]> {
        self.images
            .data()
            .outer_iter()
            .map(|img| {
                let mut h = Sha256::new();
                for v in img.iter() {
                    h.update(v.to_le_bytes());
                }
                h.finalize().into()
            })
            .collect()
    }
}

pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Number of records expected in each CIFAR-10 batch file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CifarLayout {
    pub records_per_file: usize,
}

impl CifarLayout {
    pub const STANDARD: CifarLayout = CifarLayout { records_per_file: 10_000 };
}

/// Load the five training batches and the test batch of CIFAR-10.
pub fn ingest_cifar10(dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    ingest_cifar10_with(dir, CifarLayout::STANDARD)
}

pub fn ingest_cifar10_with(dir: &Path, layout: CifarLayout) -> Result<(LabeledDataset, LabeledDataset)> {
    let nested = dir.join("cifar-10-batches-bin");
    let root = if !dir.join(CIFAR_TEST_FILE).exists() && nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    };
    let train_paths: Vec<PathBuf> = CIFAR_TRAIN_FILES.iter().map(|f| root.join(f)).collect();
    let train = read_cifar_files(&train_paths, layout, Split::Train)?;
    let test = read_cifar_files(&[root.join(CIFAR_TEST_FILE)], layout, Split::HeldOut)?;
    info!("loaded CIFAR-10: {} train, {} test", train.len(), test.len());
    Ok((train, test))
}

fn read_cifar_files(paths: &[PathBuf], layout: CifarLayout, split: Split) -> Result<LabeledDataset> {
    let expected = (layout.records_per_file * CIFAR_RECORD_BYTES) as u64;
    let mut raw = Vec::with_capacity(expected as usize * paths.len());
    for path in paths {
        if !path.is_file() {
            return Err(GuapError::MissingFile(path.clone()));
        }
        let bytes = fs::read(path).map_err(|e| GuapError::io(path, e))?;
        let found = bytes.len() as u64;
        if found < expected {
            return Err(GuapError::Truncated {
                path: path.clone(),
                expected,
                found,
            });
        }
        if found > expected {
            return Err(GuapError::Malformed {
                path: path.clone(),
                detail: format!("expected {expected} bytes, found {found}"),
            });
        }
        raw.extend_from_slice(&bytes);
    }
    let n = raw.len() / CIFAR_RECORD_BYTES;
    let mut images = Array4::<f32>::zeros((n, 3, 32, 32));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in raw.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        if rec[0] >= 10 {
            return Err(GuapError::Malformed {
                path: paths[i / layout.records_per_file.max(1)].clone(),
                detail: format!("record {i} has label {}", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        let mut img = images.slice_mut(s![i, .., .., ..]);
        for (dst, &b) in img.iter_mut().zip(&rec[1..]) {
            *dst = b as f32 / 255.0;
        }
    }
    LabeledDataset::new(ImageBatch::new(images)?, labels, 10, split)
}

/// Write images `(n, 3, 32, 32)` as one CIFAR-10 binary batch file.
pub fn write_cifar_batch(path: &Path, data: &LabeledDataset) -> Result<()> {
    ensure!(data.image_dims() == (3, 32, 32), "CIFAR batches hold 3x32x32 images");
    ensure!(data.num_classes() <= 256, "labels must fit in one byte");
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD_BYTES);
    for (img, &y) in data.images().data().outer_iter().zip(data.labels()) {
        out.push(y as u8);
        out.extend(img.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    let mut f = fs::File::create(path).map_err(|e| GuapError::io(path, e))?;
    f.write_all(&out).map_err(|e| GuapError::io(path, e))
}

/// Result of scanning a class-per-directory image tree.
#[derive(Debug, Clone)]
pub struct FolderIngest {
    pub dataset: LabeledDataset,
    pub class_names: Vec<String>,
    pub skipped: usize,
}

/// Load `dir/<class>/<image>` as RGB at `(height, width)`. Classes are indexed
/// in lexicographic directory order; undecodable files are skipped.
pub fn ingest_image_folder(
    dir: &Path,
    resolution: (usize, usize),
    per_class_cap: Option<usize>,
    split: Split,
) -> Result<FolderIngest> {
    let (h, w) = resolution;
    let mut class_dirs = sorted_entries(dir)?;
    class_dirs.retain(|p| p.is_dir());
    ensure!(!class_dirs.is_empty(), "no class directories under {}", dir.display());
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut class_names = Vec::new();
    let mut skipped = 0;
    for (label, class_dir) in class_dirs.iter().enumerate() {
        let mut files = sorted_entries(class_dir)?;
        files.retain(|p| p.is_file());
        if files.is_empty() {
            return Err(GuapError::Malformed {
                path: class_dir.clone(),
                detail: "class directory contains no images".into(),
            });
        }
        let mut kept = 0;
        for file in files {
            if per_class_cap.is_some_and(|cap| kept >= cap) {
                break;
            }
            match image::open(&file) {
                Ok(img) => {
                    let rgb = image::imageops::resize(&img.to_rgb8(), w as u32, h as u32, FilterType::Triangle);
                    for ch in 0..3 {
                        pixels.extend(rgb.pixels().map(|p| p.0[ch] as f32 / 255.0));
                    }
                    labels.push(label);
                    kept += 1;
                }
                Err(e) => {
                    warn!("skipping undecodable image {}: {e}", file.display());
                    skipped += 1;
                }
            }
        }
        class_names.push(class_dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
    }
    ensure!(!labels.is_empty(), "no decodable images under {}", dir.display());
    if skipped > 0 {
        warn!("skipped {skipped} undecodable files under {}", dir.display());
    }
    let images = Array4::from_shape_vec((labels.len(), 3, h, w), pixels).expect("pixel count matches");
    let dataset = LabeledDataset::new(ImageBatch::new(images)?, labels, class_names.len(), split)?;
    Ok(FolderIngest {
        dataset,
        class_names,
        skipped,
    })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(GuapError::MissingFile(dir.to_path_buf()));
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| GuapError::io(dir, e))? {
        out.push(entry.map_err(|e| GuapError::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Supervised training settings for a target classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Random horizontal flips during training.
    pub flip_augment: bool,
}

impl Default for ClassifierHyper {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            flip_augment: true,
        }
    }
}

/// Mean training loss per epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifierLog {
    pub epoch_loss: Vec<f64>,
}

/// Train `model` in place with Adam on mean cross-entropy.
pub fn train_classifier(model: &mut SmallCnn, data: &LabeledDataset, hyper: &ClassifierHyper) -> Result<ClassifierLog> {
    ensure!(!data.is_empty(), "cannot train on an empty dataset");
    ensure!(hyper.epochs >= 1 && hyper.batch_size >= 1, "epochs and batch size must be positive");
    ensure!(hyper.learning_rate > 0.0, "learning rate must be positive");
    ensure!(
        data.image_dims() == model.input_dims(),
        "dataset images {:?} do not fit model input {:?}",
        data.image_dims(),
        model.input_dims()
    );
    let mut opt = Adam::new(hyper.learning_rate, hyper.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut log = ClassifierLog::default();
    for epoch in 0..hyper.epochs {
        let mut total = 0.0;
        for idx in data.batch_indices(hyper.batch_size, Some(rng.random())) {
            let (mut x, y) = data.gather(&idx);
            if hyper.flip_augment {
                for mut img in x.outer_iter_mut() {
                    if rng.random_bool(0.5) {
                        let flipped = img.slice(s![.., .., ..;-1]).to_owned();
                        img.assign(&flipped);
                    }
                }
            }
            let g = Graph::new();
            let p = model.params().bind(&g, true);
            let logits = model.forward_bound(&p, g.constant(x.into_dyn()));
            let loss = logits.cross_entropy(&y).mean();
            let value = loss.scalar_value() as f64;
            if !value.is_finite() {
                return Err(GuapError::NonFinite {
                    stage: "classifier training".into(),
                    detail: format!("loss {value} at epoch {epoch}"),
                });
            }
            total += value * idx.len() as f64;
            let mut grads = g.backward(loss);
            let grads = p.gradients(&mut grads);
            opt.step(model.params_mut(), &grads);
        }
        let mean = total / data.len() as f64;
        info!("classifier {} epoch {}: loss {mean:.4}", model.id(), epoch + 1);
        log.epoch_loss.push(mean);
    }
    Ok(log)
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn accuracy(model: &dyn TargetModel, data: &LabeledDataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let pred = model.predict(data.images().data());
    let hits = pred.iter().zip(data.labels()).filter(|(p, y)| p == y).count();
    hits as f64 / data.len() as f64
}
