use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use guap::backbone::{
    accuracy, build_small_cnn, load_checkpoint, save_checkpoint, train_classifier, SmallCnn, TargetModel,
};
use guap::evaluation::{ablation_grid, evaluate, sample_size_study, transfer_matrix};
use guap::perturb::AttackBudget;
use guap::report::{
    export_triplets, write_ablation_csv, write_ablation_heatmap, write_curves_png, write_eval_csv,
    write_l2_values_csv, write_sample_study_csv, write_train_log_csv, write_transfer_csv,
};
use guap::trainer::{load_perturbation, save_generator, save_perturbation, train, UniversalPerturbation};
use log::{info, warn};

use crate::config::RunConfig;
use crate::{Command, Common};

/// Splits failures by exit code.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome<T = ()> = Result<T, Failure>;

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn runtime_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

pub fn run(command: Command) -> Outcome {
    match command {
        Command::TrainTarget { common } => {
            let cfg = resolve(&common, |_| Ok(()))?;
            let dir = start_run(&cfg)?;
            train_target(&cfg, &dir).map_err(runtime_err)
        }
        Command::Attack {
            common,
            checkpoint,
            preset,
            epsilon,
            tau,
        } => {
            let cfg = resolve(&common, |cfg| {
                if let Some(name) = &preset {
                    cfg.attack.budget = AttackBudget::preset(name)?;
                }
                let b = cfg.attack.budget;
                cfg.attack.budget = AttackBudget::new(epsilon.unwrap_or(b.epsilon), tau.unwrap_or(b.tau))?;
                cfg.attack.validate()?;
                override_path(&mut cfg.inputs.checkpoint, checkpoint);
                require_file("inputs.checkpoint", &cfg.inputs.checkpoint)
            })?;
            if cfg.attack.budget.is_identity() {
                warn!("epsilon = 0 and tau = 0: the perturbation will be the identity");
            }
            let dir = start_run(&cfg)?;
            attack(&cfg, &dir).map_err(runtime_err)
        }
        Command::Eval {
            common,
            checkpoint,
            perturbation,
        } => {
            let cfg = resolve(&common, |cfg| {
                override_path(&mut cfg.inputs.checkpoint, checkpoint);
                override_path(&mut cfg.inputs.perturbation, perturbation);
                require_file("inputs.checkpoint", &cfg.inputs.checkpoint)?;
                require_file("inputs.perturbation", &cfg.inputs.perturbation)
            })?;
            let dir = start_run(&cfg)?;
            eval(&cfg, &dir).map_err(runtime_err)
        }
        Command::Transfer {
            common,
            checkpoints,
            perturbations,
        } => {
            let cfg = resolve(&common, |cfg| {
                if !checkpoints.is_empty() {
                    cfg.inputs.checkpoints = checkpoints;
                }
                if !perturbations.is_empty() {
                    cfg.inputs.perturbations = perturbations;
                }
                require_files("inputs.checkpoints", &cfg.inputs.checkpoints)?;
                require_files("inputs.perturbations", &cfg.inputs.perturbations)
            })?;
            let dir = start_run(&cfg)?;
            transfer(&cfg, &dir).map_err(runtime_err)
        }
        Command::Ablate { common, checkpoint } => {
            let cfg = resolve(&common, |cfg| {
                override_path(&mut cfg.inputs.checkpoint, checkpoint);
                cfg.attack.validate()?;
                anyhow::ensure!(
                    !cfg.ablate.epsilons.is_empty() && !cfg.ablate.taus.is_empty(),
                    "config keys `ablate.epsilons` and `ablate.taus` must be non-empty"
                );
                require_file("inputs.checkpoint", &cfg.inputs.checkpoint)
            })?;
            let dir = start_run(&cfg)?;
            ablate(&cfg, &dir).map_err(runtime_err)
        }
        Command::SampleStudy { common, checkpoint } => {
            let cfg = resolve(&common, |cfg| {
                override_path(&mut cfg.inputs.checkpoint, checkpoint);
                cfg.attack.validate()?;
                anyhow::ensure!(
                    !cfg.sample_study.sizes.is_empty(),
                    "config key `sample_study.sizes` must be non-empty"
                );
                require_file("inputs.checkpoint", &cfg.inputs.checkpoint)
            })?;
            let dir = start_run(&cfg)?;
            sample_study(&cfg, &dir).map_err(runtime_err)
        }
        Command::ExportImages {
            common,
            perturbation,
            count,
        } => {
            let cfg = resolve(&common, |cfg| {
                override_path(&mut cfg.inputs.perturbation, perturbation);
                if let Some(n) = count {
                    cfg.export.count = n;
                }
                require_file("inputs.perturbation", &cfg.inputs.perturbation)
            })?;
            let dir = start_run(&cfg)?;
            export_images(&cfg, &dir).map_err(runtime_err)
        }
    }
}

/// Loads the config file, applies command-line overrides and validates.
fn resolve(common: &Common, apply: impl FnOnce(&mut RunConfig) -> anyhow::Result<()>) -> Outcome<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(config_err)?,
        None => RunConfig::default(),
    };
    if let Some(tag) = &common.tag {
        cfg.tag.clone_from(tag);
    }
    apply(&mut cfg).map_err(config_err)?;
    cfg.check_data().map_err(config_err)?;
    Ok(cfg)
}

fn override_path(slot: &mut Option<PathBuf>, flag: Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn require_file(key: &str, value: &Option<PathBuf>) -> anyhow::Result<()> {
    match value {
        None => Err(anyhow!("config key `{key}` (or the matching flag) is required")),
        Some(p) if !p.is_file() => Err(anyhow!("config key `{key}`: {} does not exist", p.display())),
        Some(_) => Ok(()),
    }
}

fn require_files(key: &str, values: &[PathBuf]) -> anyhow::Result<()> {
    anyhow::ensure!(!values.is_empty(), "config key `{key}` (or the matching flag) needs at least one path");
    for p in values {
        anyhow::ensure!(p.is_file(), "config key `{key}`: {} does not exist", p.display());
    }
    Ok(())
}

/// Creates `<root>/<timestamp>-<tag>/` and writes the resolved config into it.
fn start_run(cfg: &RunConfig) -> Outcome<PathBuf> {
    let root = cfg.resolved_output_root();
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{stamp}-{}", cfg.tag);
    let mut dir = root.join(&base);
    let mut k = 2;
    while dir.exists() {
        dir = root.join(format!("{base}-{k}"));
        k += 1;
    }
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating run directory {}", dir.display()))
        .map_err(runtime_err)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())
        .context("writing resolved config")
        .map_err(runtime_err)?;
    println!("run directory: {}", dir.display());
    Ok(dir)
}

fn checkpoint(cfg: &RunConfig) -> anyhow::Result<SmallCnn> {
    let path = cfg.inputs.checkpoint.as_deref().expect("validated");
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn perturbation(path: &Path) -> anyhow::Result<UniversalPerturbation> {
    load_perturbation(path).with_context(|| format!("loading perturbation {}", path.display()))
}

fn train_target(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let (train_set, heldout) = cfg.load_data()?;
    let mut model = build_small_cnn(cfg.target.preset, cfg.target.seed, train_set.image_dims(), train_set.num_classes())?;
    let log = train_classifier(&mut model, &train_set, &cfg.classifier)?;
    let acc = accuracy(&model, &heldout);
    let path = dir.join("target.ckpt");
    save_checkpoint(&path, &model)?;
    let mut metrics = format!("metric,value\nheldout_accuracy,{acc}\n");
    for (i, loss) in log.epoch_loss.iter().enumerate() {
        writeln!(metrics, "epoch_{}_loss,{loss}", i + 1)?;
    }
    std::fs::write(dir.join("target_metrics.csv"), metrics)?;
    println!("held-out accuracy: {acc:.4}");
    println!("checkpoint: {}", path.display());
    Ok(())
}

fn attack(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let model = checkpoint(cfg)?;
    let (train_set, heldout) = cfg.load_data()?;
    let budget = cfg.attack.budget;
    info!("attacking {} with epsilon {} tau {}", model.id(), budget.epsilon, budget.tau);
    let trained = train(&train_set, &model, &cfg.attack, Some(&heldout))?;
    let p = trained.freeze(model.id(), budget)?;
    if p.degenerate_flow {
        warn!("generator flow collapsed to zero; the artifact carries no spatial component");
    }
    let path = dir.join("perturbation.guap");
    save_perturbation(&p, &path)?;
    save_generator(&dir.join("generator.ckpt"), &trained.generator)?;
    write_train_log_csv(&dir.join("train_log.csv"), &trained.log)?;
    if let Some(asr) = trained.log.final_val_asr {
        println!("held-out ASR: {asr:.4}");
    }
    println!("perturbation: {}", path.display());
    Ok(())
}

fn eval(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let model = checkpoint(cfg)?;
    let p = perturbation(cfg.inputs.perturbation.as_deref().expect("validated"))?;
    let (_, heldout) = cfg.load_data()?;
    let report = evaluate(&p, &heldout, &model)?;
    write_eval_csv(&dir.join("eval.csv"), &report)?;
    write_l2_values_csv(&dir.join("l2_values.csv"), &report)?;
    println!(
        "ASR {:.4} (initially correct {:.4}), clean accuracy {:.4}, mean l2 {:.3}",
        report.asr, report.asr_initially_correct, report.clean_accuracy, report.l2.mean
    );
    Ok(())
}

fn transfer(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let models = cfg
        .inputs
        .checkpoints
        .iter()
        .map(|p| load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let perts = cfg
        .inputs
        .perturbations
        .iter()
        .map(|p| perturbation(p))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let (_, heldout) = cfg.load_data()?;
    let victims: Vec<&dyn TargetModel> = models.iter().map(|m| m as &dyn TargetModel).collect();
    let matrix = transfer_matrix(&perts, &victims, &heldout)?;
    for e in &matrix.errors {
        warn!("{e}");
    }
    let path = dir.join("transfer.csv");
    write_transfer_csv(&path, &matrix)?;
    println!("transfer matrix: {}", path.display());
    Ok(())
}

fn ablate(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let model = checkpoint(cfg)?;
    let (train_set, heldout) = cfg.load_data()?;
    let grid = ablation_grid(&train_set, &heldout, &model, &cfg.ablate.epsilons, &cfg.ablate.taus, &cfg.attack)?;
    write_ablation_csv(&dir.join("ablation.csv"), &grid)?;
    write_ablation_heatmap(&dir.join("ablation.png"), &grid, 24)?;
    for e in &grid.errors {
        warn!("{e}");
    }
    println!("ablation grid: {}", dir.join("ablation.csv").display());
    Ok(())
}

fn sample_study(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let model = checkpoint(cfg)?;
    let (train_set, heldout) = cfg.load_data()?;
    let points = sample_size_study(&train_set, &heldout, &model, &cfg.sample_study.sizes, &cfg.attack)?;
    write_sample_study_csv(&dir.join("sample_study.csv"), &points)?;
    let curve: Vec<(f64, f64)> = points.iter().map(|p| (p.size as f64, p.asr)).collect();
    write_curves_png(&dir.join("sample_study.png"), &[curve], 1.0)?;
    for p in &points {
        println!("n = {}: ASR {:.4}", p.size, p.asr);
    }
    Ok(())
}

fn export_images(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let p = perturbation(cfg.inputs.perturbation.as_deref().expect("validated"))?;
    let (_, heldout) = cfg.load_data()?;
    let out = dir.join("images");
    let written = export_triplets(&out, &p, &heldout, cfg.export.count, cfg.export.scale)?;
    println!("wrote {} images to {}", written.len(), out.display());
    Ok(())
}
