//! Generator optimization against a frozen classifier, freezing the result
//! into a single deployable perturbation, and persisting both.

mod artifact;

use std::path::Path;
use std::time::Instant;

use log::info;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use artifact::{load_perturbation, save_perturbation, UniversalPerturbation, ARTIFACT_MAGIC, ARTIFACT_VERSION};

use crate::autodiff::{Graph, Var};
use crate::backbone::{argmax_rows, LabeledDataset, TargetModel};
use crate::error::{ensure, GuapError, Result};
use crate::evaluation::attack_success_rate;
use crate::flowwarp::{scale_flow, DEGENERATE_BUDGET};
use crate::generator::{FlowRange, Generator, GeneratorArch, SeedPattern};
use crate::nn::Adam;
use crate::objective::LossVariant;
use crate::perturb::{scale_noise, AttackBudget, DEGENERATE_NOISE};
use crate::persist::{load_tensors, save_tensors};

/// Which input pattern the generator sees during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ZPolicy {
    /// Fresh pattern for every minibatch; one pattern is fixed at freeze time.
    #[default]
    ResamplePerBatch,
    /// The freeze-time pattern is used throughout training.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub budget: AttackBudget,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossVariant,
    pub z_policy: ZPolicy,
    pub base_width: usize,
    pub num_resnet_blocks: usize,
    pub flow_range: FlowRange,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            budget: AttackBudget::V3,
            learning_rate: 2e-4,
            weight_decay: 0.0,
            seed: 0,
            loss: LossVariant::ScaledCe,
            z_policy: ZPolicy::ResamplePerBatch,
            base_width: 64,
            num_resnet_blocks: 2,
            flow_range: FlowRange::Signed,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, "epochs must be at least 1");
        ensure!(self.batch_size >= 1, "batch size must be at least 1");
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning rate must be positive"
        );
        ensure!(self.weight_decay >= 0.0, "weight decay must be non-negative");
        AttackBudget::new(self.budget.epsilon, self.budget.tau)?;
        Ok(())
    }

    pub fn generator_arch(&self, dims: (usize, usize, usize)) -> GeneratorArch {
        let (c, h, w) = dims;
        GeneratorArch {
            in_channels: c,
            base_width: self.base_width,
            num_resnet_blocks: self.num_resnet_blocks,
            height: h,
            width: w,
            flow_range: self.flow_range,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Fraction of training images fooled by the perturbation of their own
    /// minibatch step, accumulated over the epoch.
    pub train_asr: f64,
    /// Held-out ASR of the frozen perturbation after this epoch.
    pub val_asr: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub final_val_asr: Option<f64>,
}

/// Output of [`train`]: the generator, the pattern fixed for deployment and the log.
#[derive(Debug, Clone)]
pub struct TrainedAttack {
    pub generator: Generator<f32>,
    pub seed_pattern: SeedPattern<f32>,
    pub log: TrainLog,
}

impl TrainedAttack {
    pub fn freeze(&self, target_id: &str, budget: AttackBudget) -> Result<UniversalPerturbation> {
        freeze_perturbation(&self.generator, &self.seed_pattern, budget, target_id)
    }
}

/// Rescale the graph's raw outputs to the budget and build the adversarial batch.
fn adversarial_batch<'g>(
    x: Var<'g, f32>,
    delta0: Var<'g, f32>,
    flow0: Var<'g, f32>,
    budget: AttackBudget,
) -> Var<'g, f32> {
    let mut adv = x;
    if budget.tau > 0.0 {
        let b = flow0.flow_budget();
        if b.scalar_value() as f64 > DEGENERATE_BUDGET {
            let flow = flow0.scale_by(b.recip_scaled(budget.tau as f32));
            adv = adv.warp(flow);
        }
    }
    if budget.epsilon > 0.0 {
        let m = delta0.linf();
        if m.scalar_value() as f64 > DEGENERATE_NOISE {
            let delta = delta0.scale_by(m.recip_scaled(budget.epsilon as f32));
            adv = adv.add_broadcast_batch(delta);
        }
    }
    adv.clamp(0.0, 1.0)
}

/// Optimize a generator so its budget-scaled output fools `target` on `data`.
/// The target is only read; `validation`, when given, is scored after every epoch.
pub fn train(
    data: &LabeledDataset,
    target: &dyn TargetModel,
    cfg: &TrainConfig,
    validation: Option<&LabeledDataset>,
) -> Result<TrainedAttack> {
    cfg.validate()?;
    ensure!(!data.is_empty(), "cannot train on an empty dataset");
    let dims = data.image_dims();
    ensure!(
        dims == target.input_dims(),
        "dataset images {dims:?} do not fit target input {:?}",
        target.input_dims()
    );
    let (c, h, w) = dims;
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut generator = Generator::<f32>::init(cfg.generator_arch(dims), seeds.next_u64())?;
    let seed_pattern = SeedPattern::<f32>::sample(c, h, w, seeds.next_u64());
    let clean = target.predict(data.images().data());
    let mut opt = Adam::new(cfg.learning_rate, cfg.weight_decay);
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let (mut loss_sum, mut fooled) = (0.0, 0usize);
        for idx in data.batch_indices(cfg.batch_size, Some(seeds.next_u64())) {
            let z = match cfg.z_policy {
                ZPolicy::ResamplePerBatch => SeedPattern::<f32>::sample(c, h, w, seeds.next_u64()),
                ZPolicy::Fixed => seed_pattern.clone(),
            };
            let (x, _) = data.gather(&idx);
            let labels: Vec<usize> = idx.iter().map(|&i| clean[i]).collect();
            let g = Graph::new();
            let p = generator.params().bind(&g, true);
            let (delta0, flow0) = generator.forward_graph(&p, g.constant(z.data.into_dyn()));
            let adv = adversarial_batch(g.constant(x.into_dyn()), delta0, flow0, cfg.budget);
            let logits = target.forward(&g, adv);
            let loss = cfg.loss.attack_loss(logits, &labels);
            let value = loss.scalar_value() as f64;
            if !value.is_finite() {
                return Err(GuapError::NonFinite {
                    stage: "generator training".into(),
                    detail: format!("loss {value} at epoch {}", epoch + 1),
                });
            }
            let preds = argmax_rows(
                &logits
                    .value()
                    .as_ref()
                    .clone()
                    .into_dimensionality()
                    .expect("logits are (n, C)"),
            );
            fooled += preds.iter().zip(&labels).filter(|(a, b)| a != b).count();
            loss_sum += value * idx.len() as f64;
            let mut grads = g.backward(loss);
            let grads = p.gradients(&mut grads);
            opt.step(generator.params_mut(), &grads);
        }
        let val_asr = match validation {
            Some(v) => {
                let frozen = freeze_perturbation(&generator, &seed_pattern, cfg.budget, target.id())?;
                Some(attack_success_rate(&frozen, v, target)?)
            }
            None => None,
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            mean_loss: loss_sum / data.len() as f64,
            train_asr: fooled as f64 / data.len() as f64,
            val_asr,
            seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "attack epoch {}: loss {:.4}, train ASR {:.3}, val ASR {:?}",
            record.epoch, record.mean_loss, record.train_asr, record.val_asr
        );
        log.final_val_asr = val_asr;
        log.epochs.push(record);
    }
    Ok(TrainedAttack {
        generator,
        seed_pattern,
        log,
    })
}

/// One generator pass on `z`, rescaled to `budget`.
pub fn freeze_perturbation(
    generator: &Generator<f32>,
    z: &SeedPattern<f32>,
    budget: AttackBudget,
    target_id: &str,
) -> Result<UniversalPerturbation> {
    let raw = generator.forward(z)?;
    let noise = scale_noise(&raw.delta0, budget.epsilon)?;
    let scaled = scale_flow(&raw.flow0, budget.tau)?;
    Ok(UniversalPerturbation {
        flow: scaled.flow,
        noise,
        budget,
        seed_digest: z.digest(),
        target_id: target_id.to_string(),
        degenerate_flow: budget.tau > 0.0 && scaled.degenerate,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GeneratorMeta {
    kind: String,
    arch: GeneratorArch,
}

const GENERATOR_KIND: &str = "generator";

pub fn save_generator(path: &Path, generator: &Generator<f32>) -> Result<()> {
    let meta = GeneratorMeta {
        kind: GENERATOR_KIND.into(),
        arch: *generator.arch(),
    };
    save_tensors(path, &meta, generator.params())
}

pub fn load_generator(path: &Path) -> Result<Generator<f32>> {
    let (meta, params): (GeneratorMeta, _) = load_tensors(path)?;
    if meta.kind != GENERATOR_KIND {
        return Err(GuapError::Malformed {
            path: path.to_path_buf(),
            detail: format!("expected a {GENERATOR_KIND} checkpoint, found {:?}", meta.kind),
        });
    }
    Generator::from_params(meta.arch, params)
}
