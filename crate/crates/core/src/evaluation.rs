//! Attack success rate, 8-bit l2 distortion, transfer matrices and the
//! budget / sample-size ablations.

use log::{info, warn};
use ndarray::{s, Array3, ArrayView4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{LabeledDataset, TargetModel};
use crate::error::{ensure, Result};
use crate::flowwarp::{scale_flow, FlowField};
use crate::perturb::{scale_noise, AttackBudget, NoiseField};
use crate::trainer::{train, TrainConfig, UniversalPerturbation};

const EVAL_CHUNK: usize = 256;

/// Which images count towards the success rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AsrMode {
    /// Every image whose prediction changes (fooling rate).
    #[default]
    AllImages,
    /// Only images the model classified correctly before the attack.
    InitiallyCorrect,
}

/// Clean and adversarial predictions for every image of `data`.
fn predictions(p: &UniversalPerturbation, data: &LabeledDataset, model: &dyn TargetModel) -> Result<(Vec<usize>, Vec<usize>)> {
    ensure!(!data.is_empty(), "cannot evaluate on an empty dataset");
    p.check_fits(data.image_dims())?;
    ensure!(
        model.input_dims() == data.image_dims(),
        "model {} expects {:?}, dataset has {:?}",
        model.id(),
        model.input_dims(),
        data.image_dims()
    );
    let x = data.images().data();
    let (mut clean, mut adv) = (Vec::with_capacity(data.len()), Vec::with_capacity(data.len()));
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_CHUNK).min(data.len());
        let chunk: ArrayView4<f32> = x.slice(s![start..end, .., .., ..]);
        let owned = chunk.to_owned();
        clean.extend(model.predict(&owned));
        adv.extend(model.predict(&p.apply_view(chunk)));
        start = end;
    }
    Ok((clean, adv))
}

/// Fraction of images whose predicted class changes under `p`.
pub fn attack_success_rate(p: &UniversalPerturbation, data: &LabeledDataset, model: &dyn TargetModel) -> Result<f64> {
    attack_success_rate_with(p, data, model, AsrMode::AllImages)
}

pub fn attack_success_rate_with(
    p: &UniversalPerturbation,
    data: &LabeledDataset,
    model: &dyn TargetModel,
    mode: AsrMode,
) -> Result<f64> {
    let (clean, adv) = predictions(p, data, model)?;
    Ok(asr_from_predictions(&clean, &adv, data.labels(), mode))
}

fn asr_from_predictions(clean: &[usize], adv: &[usize], labels: &[usize], mode: AsrMode) -> f64 {
    let (mut fooled, mut counted) = (0usize, 0usize);
    for ((c, a), y) in clean.iter().zip(adv).zip(labels) {
        if mode == AsrMode::InitiallyCorrect && c != y {
            continue;
        }
        counted += 1;
        fooled += usize::from(c != a);
    }
    if counted == 0 {
        0.0
    } else {
        fooled as f64 / counted as f64
    }
}

/// Per-image l2 distortion on the rounded 0-255 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L2Stats {
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub values: Vec<f64>,
}

/// l2 norm of `round(255 x_adv) - round(255 x)` per image.
pub fn l2_report(p: &UniversalPerturbation, data: &LabeledDataset) -> Result<L2Stats> {
    ensure!(!data.is_empty(), "cannot evaluate on an empty dataset");
    p.check_fits(data.image_dims())?;
    let x = data.images().data();
    let mut values = Vec::with_capacity(data.len());
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_CHUNK).min(data.len());
        let chunk = x.slice(s![start..end, .., .., ..]);
        let adv = p.apply_view(chunk);
        for (a, c) in adv.outer_iter().zip(chunk.outer_iter()) {
            let sq: f64 = a
                .iter()
                .zip(c.iter())
                .map(|(&a, &c)| {
                    let d = (255.0 * a as f64).round() - (255.0 * c as f64).round();
                    d * d
                })
                .sum();
            values.push(sq.sqrt());
        }
        start = end;
    }
    Ok(l2_stats(values))
}

fn l2_stats(values: Vec<f64>) -> L2Stats {
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    L2Stats {
        mean: values.iter().sum::<f64>() / n as f64,
        median,
        max: sorted[n - 1],
        values,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub num_images: usize,
    pub asr: f64,
    pub asr_initially_correct: f64,
    pub clean_accuracy: f64,
    pub adversarial_accuracy: f64,
    pub l2: L2Stats,
    /// ASR over the images of each true class; `None` for absent classes.
    pub per_class_asr: Vec<Option<f64>>,
}

pub fn evaluate(p: &UniversalPerturbation, data: &LabeledDataset, model: &dyn TargetModel) -> Result<EvalReport> {
    let (clean, adv) = predictions(p, data, model)?;
    let labels = data.labels();
    let n = data.len() as f64;
    let acc = |pred: &[usize]| pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / n;
    let mut per_class = vec![(0usize, 0usize); data.num_classes()];
    for ((c, a), &y) in clean.iter().zip(&adv).zip(labels) {
        per_class[y].0 += usize::from(c != a);
        per_class[y].1 += 1;
    }
    Ok(EvalReport {
        model_id: model.id().to_string(),
        num_images: data.len(),
        asr: asr_from_predictions(&clean, &adv, labels, AsrMode::AllImages),
        asr_initially_correct: asr_from_predictions(&clean, &adv, labels, AsrMode::InitiallyCorrect),
        clean_accuracy: acc(&clean),
        adversarial_accuracy: acc(&adv),
        l2: l2_report(p, data)?,
        per_class_asr: per_class
            .into_iter()
            .map(|(f, t)| (t > 0).then(|| f as f64 / t as f64))
            .collect(),
    })
}

/// Rows are the models the perturbations were trained on, columns the victims.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub sources: Vec<String>,
    pub victims: Vec<String>,
    /// `None` marks a cell that could not be evaluated.
    pub asr: Vec<Vec<Option<f64>>>,
    pub errors: Vec<String>,
}

impl TransferMatrix {
    /// Column means over all valid source rows.
    pub fn average_with_diagonal(&self) -> Vec<Option<f64>> {
        self.column_means(|_, _| true)
    }

    /// Column means over valid rows whose source differs from the victim.
    pub fn average_without_diagonal(&self) -> Vec<Option<f64>> {
        self.column_means(|i, j| i != j)
    }

    fn column_means(&self, keep: impl Fn(usize, usize) -> bool) -> Vec<Option<f64>> {
        (0..self.victims.len())
            .map(|j| {
                let vals: Vec<f64> = (0..self.sources.len())
                    .filter(|&i| keep(i, j))
                    .filter_map(|i| self.asr[i][j])
                    .collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect()
    }
}

/// ASR of perturbation `i` against model `j` for every pair.
pub fn transfer_matrix(
    perts: &[UniversalPerturbation],
    models: &[&dyn TargetModel],
    data: &LabeledDataset,
) -> Result<TransferMatrix> {
    ensure!(!perts.is_empty() && !models.is_empty(), "transfer matrix needs perturbations and models");
    let mut errors = Vec::new();
    let asr = perts
        .iter()
        .map(|p| {
            models
                .iter()
                .map(|&m| match attack_success_rate(p, data, m) {
                    Ok(v) => Some(v),
                    Err(e) => {
                        warn!("transfer cell {} -> {} failed: {e}", p.target_id, m.id());
                        errors.push(format!("{} -> {}: {e}", p.target_id, m.id()));
                        None
                    }
                })
                .collect()
        })
        .collect();
    Ok(TransferMatrix {
        sources: perts.iter().map(|p| p.target_id.clone()).collect(),
        victims: models.iter().map(|m| m.id().to_string()).collect(),
        asr,
        errors,
    })
}

/// Held-out ASR for each `(tau, epsilon)` cell: rows follow `taus`, columns `epsilons`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub epsilons: Vec<f64>,
    pub taus: Vec<f64>,
    pub asr: Vec<Vec<Option<f64>>>,
    pub errors: Vec<String>,
}

/// Train and score one perturbation per budget pair with shared seeds and data order.
pub fn ablation_grid(
    train_data: &LabeledDataset,
    heldout: &LabeledDataset,
    model: &dyn TargetModel,
    epsilons: &[f64],
    taus: &[f64],
    cfg: &TrainConfig,
) -> Result<AblationGrid> {
    ensure!(!epsilons.is_empty() && !taus.is_empty(), "ablation grids must be non-empty");
    let mut errors = Vec::new();
    let mut asr = Vec::with_capacity(taus.len());
    for &tau in taus {
        let mut row = Vec::with_capacity(epsilons.len());
        for &epsilon in epsilons {
            match budget_cell(train_data, heldout, model, epsilon, tau, cfg) {
                Ok(v) => {
                    info!("ablation eps {epsilon} tau {tau}: ASR {v:.4}");
                    row.push(Some(v));
                }
                Err(e) => {
                    warn!("ablation eps {epsilon} tau {tau} failed: {e}");
                    errors.push(format!("epsilon {epsilon}, tau {tau}: {e}"));
                    row.push(None);
                }
            }
        }
        asr.push(row);
    }
    Ok(AblationGrid {
        epsilons: epsilons.to_vec(),
        taus: taus.to_vec(),
        asr,
        errors,
    })
}

fn budget_cell(
    train_data: &LabeledDataset,
    heldout: &LabeledDataset,
    model: &dyn TargetModel,
    epsilon: f64,
    tau: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let budget = AttackBudget::new(epsilon, tau)?;
    // A zero budget freezes to the identity whatever the generator learns.
    let p = if budget.is_identity() {
        UniversalPerturbation::identity(train_data.image_dims(), model.id())
    } else {
        let cell_cfg = TrainConfig { budget, ..cfg.clone() };
        train(train_data, model, &cell_cfg, None)?.freeze(model.id(), budget)?
    };
    attack_success_rate(&p, heldout, model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub size: usize,
    pub asr: f64,
    /// SHA-256 over the digests of the images in the training subset.
    pub subset_digest: [u8; 32],
}

/// Train on nested prefixes of `train_data` and score each on all of `heldout`.
pub fn sample_size_study(
    train_data: &LabeledDataset,
    heldout: &LabeledDataset,
    model: &dyn TargetModel,
    sizes: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<SamplePoint>> {
    ensure!(!sizes.is_empty(), "sample sizes must be non-empty");
    ensure!(sizes.windows(2).all(|w| w[0] < w[1]), "sample sizes must be strictly ascending");
    ensure!(
        sizes.iter().all(|&s| s >= 1 && s <= train_data.len()),
        "sample sizes must lie in [1, {}]",
        train_data.len()
    );
    sizes
        .iter()
        .map(|&size| {
            let subset = train_data.prefix(size)?;
            let trained = train(&subset, model, cfg, None)?;
            let p = trained.freeze(model.id(), cfg.budget)?;
            let asr = attack_success_rate(&p, heldout, model)?;
            info!("sample study n={size}: ASR {asr:.4}");
            let mut h = Sha256::new();
            for d in subset.image_digests() {
                h.update(d);
            }
            Ok(SamplePoint {
                size,
                asr,
                subset_digest: h.finalize().into(),
            })
        })
        .collect()
}

/// Random flow and noise meeting `budget` exactly, as an attack baseline.
pub fn random_perturbation(
    dims: (usize, usize, usize),
    budget: AttackBudget,
    seed: u64,
    target_id: &str,
) -> Result<UniversalPerturbation> {
    let (c, h, w) = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |shape: (usize, usize, usize)| Array3::from_shape_simple_fn(shape, || rng.random_range(-1.0f32..=1.0));
    let noise = scale_noise(&NoiseField::new(uniform((c, h, w)))?, budget.epsilon)?;
    let flow = scale_flow(&FlowField::new(uniform((2, h, w)))?, budget.tau)?;
    Ok(UniversalPerturbation {
        flow: flow.flow,
        noise,
        budget,
        seed_digest: [0; 32],
        target_id: target_id.to_string(),
        degenerate_flow: budget.tau > 0.0 && flow.degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn asr_modes_count_differently() {
        let clean = [0, 1, 2, 3];
        let adv = [1, 1, 0, 0];
        let labels = [0, 0, 2, 3];
        assert_eq!(asr_from_predictions(&clean, &adv, &labels, AsrMode::AllImages), 0.75);
        assert_eq!(asr_from_predictions(&clean, &adv, &labels, AsrMode::InitiallyCorrect), 1.0);
    }

    #[test]
    fn stats_median_and_max() {
        let s = l2_stats(vec![3.0, 1.0, 2.0, 10.0]);
        assert_eq!((s.mean, s.median, s.max), (4.0, 2.5, 10.0));
    }

    #[test]
    fn transfer_averages() {
        let m = TransferMatrix {
            sources: vec!["a".into(), "b".into()],
            victims: vec!["a".into(), "b".into()],
            asr: vec![vec![Some(0.8), Some(0.4)], vec![Some(0.2), Some(0.6)]],
            errors: vec![],
        };
        assert_eq!(m.average_with_diagonal(), vec![Some(0.5), Some(0.5)]);
        assert_eq!(m.average_without_diagonal(), vec![Some(0.2), Some(0.4)]);
    }

    #[test]
    fn random_baseline_meets_budget() {
        let p = random_perturbation((3, 8, 8), AttackBudget::V3, 5, "m").unwrap();
        assert!((p.noise.linf() - 0.04).abs() < 1e-7);
        assert!((crate::flowwarp::flow_budget(&p.flow).value() - 0.1).abs() < 1e-5);
    }
}
