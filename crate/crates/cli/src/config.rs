//! Run configuration: a TOML file with one section per concern.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use guap::backbone::{
    grating_benchmark, ingest_cifar10, ingest_image_folder, ClassifierHyper, GratingSpec, LabeledDataset, Preset,
    Split,
};
use guap::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

pub const OUTPUT_ROOT_ENV: &str = "GUAP_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Suffix of the run directory name.
    pub tag: String,
    pub output_root: PathBuf,
    pub data: DataConfig,
    pub target: TargetConfig,
    pub classifier: ClassifierHyper,
    pub attack: TrainConfig,
    pub inputs: InputsConfig,
    pub ablate: AblateConfig,
    pub sample_study: SampleStudyConfig,
    pub export: ExportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tag: "run".into(),
            output_root: PathBuf::from("outputs"),
            data: DataConfig::default(),
            target: TargetConfig::default(),
            classifier: ClassifierHyper::default(),
            attack: TrainConfig::default(),
            inputs: InputsConfig::default(),
            ablate: AblateConfig::default(),
            sample_study: SampleStudyConfig::default(),
            export: ExportConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Cifar10,
    ImageFolder,
    #[default]
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// CIFAR-10 batch directory, or the training image folder.
    pub path: Option<PathBuf>,
    /// Held-out image folder.
    pub heldout_path: Option<PathBuf>,
    /// Resize target for image folders.
    pub height: usize,
    pub width: usize,
    pub per_class_cap: Option<usize>,
    pub train_limit: Option<usize>,
    pub heldout_limit: Option<usize>,
    pub synthetic: GratingSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::default(),
            path: None,
            heldout_path: None,
            height: 32,
            width: 32,
            per_class_cap: None,
            train_limit: None,
            heldout_limit: None,
            synthetic: GratingSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetConfig {
    pub preset: Preset,
    /// Seed for the classifier's initial weights.
    pub seed: u64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Convnet4,
            seed: 0,
        }
    }
}

/// Artifacts consumed by a command. Command-line flags override these.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputsConfig {
    pub checkpoint: Option<PathBuf>,
    pub perturbation: Option<PathBuf>,
    /// Victim models for `transfer`.
    pub checkpoints: Vec<PathBuf>,
    /// Source perturbations for `transfer`.
    pub perturbations: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub epsilons: Vec<f64>,
    pub taus: Vec<f64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            epsilons: vec![0.0, 0.01, 0.02, 0.03, 0.04],
            taus: vec![0.0, 0.05, 0.1, 0.15],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleStudyConfig {
    pub sizes: Vec<usize>,
}

impl Default for SampleStudyConfig {
    fn default() -> Self {
        Self {
            sizes: vec![500, 1000, 2000, 5000, 10_000],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportConfig {
    pub count: usize,
    /// Nearest-neighbour upscaling factor for the PNGs.
    pub scale: u32,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self { count: 8, scale: 4 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// `GUAP_OUTPUT_ROOT` wins over the configured root.
    pub fn resolved_output_root(&self) -> PathBuf {
        std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_root.clone())
    }

    /// Checks that everything needed to load data is present, naming the offending key.
    pub fn check_data(&self) -> anyhow::Result<()> {
        let need_dir = |key: &str, value: &Option<PathBuf>| -> anyhow::Result<()> {
            match value {
                None => bail!("config key `{key}` is required for data source {:?}", self.data.source),
                Some(p) if !p.is_dir() => bail!("config key `{key}`: {} is not a directory", p.display()),
                Some(_) => Ok(()),
            }
        };
        match self.data.source {
            DataSource::Cifar10 => need_dir("data.path", &self.data.path),
            DataSource::ImageFolder => {
                need_dir("data.path", &self.data.path)?;
                need_dir("data.heldout_path", &self.data.heldout_path)
            }
            DataSource::Synthetic => Ok(()),
        }
    }

    /// Loads the train and held-out splits, truncated to the configured limits.
    pub fn load_data(&self) -> anyhow::Result<(LabeledDataset, LabeledDataset)> {
        let d = &self.data;
        let (train, heldout) = match d.source {
            DataSource::Cifar10 => ingest_cifar10(d.path.as_deref().expect("checked"))?,
            DataSource::ImageFolder => {
                let res = (d.height, d.width);
                let train = ingest_image_folder(d.path.as_deref().expect("checked"), res, d.per_class_cap, Split::Train)?;
                let heldout = ingest_image_folder(
                    d.heldout_path.as_deref().expect("checked"),
                    res,
                    d.per_class_cap,
                    Split::HeldOut,
                )?;
                if train.class_names != heldout.class_names {
                    bail!(
                        "train classes {:?} differ from held-out classes {:?}",
                        train.class_names,
                        heldout.class_names
                    );
                }
                (train.dataset, heldout.dataset)
            }
            DataSource::Synthetic => grating_benchmark(&d.synthetic)?,
        };
        let cut = |set: LabeledDataset, limit: Option<usize>| match limit {
            Some(n) if n < set.len() => set.prefix(n),
            _ => Ok(set),
        };
        Ok((cut(train, d.train_limit)?, cut(heldout, d.heldout_limit)?))
    }
}
