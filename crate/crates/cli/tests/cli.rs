use std::path::{Path, PathBuf};
use std::process::Command;

use guap::perturb::AttackBudget;
use guap::trainer::{save_perturbation, UniversalPerturbation};

const TINY: &str = r#"
tag = "tiny"

[data]
source = "synthetic"

[data.synthetic]
height = 8
width = 8
train_size = 40
heldout_size = 20
seed = 3

[classifier]
epochs = 1
batch_size = 8
flip_augment = false

[attack]
epochs = 1
batch_size = 8
base_width = 8
learning_rate = 0.001

[export]
count = 2
scale = 2
"#;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
    dir: Option<PathBuf>,
}

fn guap(root: &Path, args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_guap"))
        .args(args)
        .env("GUAP_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    let dir = stdout
        .lines()
        .find_map(|l| l.strip_prefix("run directory: "))
        .map(PathBuf::from);
    Run {
        code: out.status.code().unwrap(),
        stdout,
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        dir,
    }
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn header_budget(path: &Path) -> (f64, f64) {
    let b = std::fs::read(path).unwrap();
    assert_eq!(&b[..4], b"GUAP");
    let f = |at: usize| f64::from_le_bytes(b[at..at + 8].try_into().unwrap());
    (f(8), f(16))
}

fn accuracy_line(run: &Run) -> String {
    run.stdout.lines().find(|l| l.starts_with("held-out accuracy")).unwrap().to_string()
}

#[test]
fn usage_errors_exit_one() {
    let root = tempfile::tempdir().unwrap();
    assert_eq!(guap(root.path(), &[]).code, 1);
    assert_eq!(guap(root.path(), &["fly"]).code, 1);
    assert_eq!(guap(root.path(), &["--help"]).code, 0);
}

#[test]
fn unknown_config_key_exits_one() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), "bad.toml", "[attack]\nepochz = 2\n");
    let run = guap(root.path(), &["train-target", "--config", &cfg]);
    assert_eq!(run.code, 1);
    assert!(run.stderr.contains("epochz"), "{}", run.stderr);
}

#[test]
fn missing_dataset_path_names_the_key() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), "c.toml", "[data]\nsource = \"cifar10\"\n");
    let run = guap(root.path(), &["train-target", "--config", &cfg]);
    assert_eq!(run.code, 1);
    assert!(run.stderr.contains("data.path"), "{}", run.stderr);
    let cfg = write_config(root.path(), "d.toml", "[data]\nsource = \"cifar10\"\npath = \"/nonexistent/cifar\"\n");
    let run = guap(root.path(), &["train-target", "--config", &cfg]);
    assert_eq!(run.code, 1);
    assert!(run.stderr.contains("data.path"), "{}", run.stderr);
}

#[test]
fn attack_without_checkpoint_exits_one() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), "tiny.toml", TINY);
    let run = guap(root.path(), &["attack", "--config", &cfg, "--preset", "v1"]);
    assert_eq!(run.code, 1);
    assert!(run.stderr.contains("inputs.checkpoint"), "{}", run.stderr);
}

#[test]
fn full_pipeline() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), "tiny.toml", TINY);

    let first = guap(root.path(), &["train-target", "--config", &cfg]);
    assert_eq!(first.code, 0, "{}", first.stderr);
    let run_dir = first.dir.clone().unwrap();
    assert!(run_dir.starts_with(root.path()));
    assert!(run_dir.file_name().unwrap().to_string_lossy().ends_with("-tiny"));
    let resolved = std::fs::read_to_string(run_dir.join("config.toml")).unwrap();
    assert!(resolved.contains("train_size = 40"));
    let ckpt = run_dir.join("target.ckpt");
    assert!(ckpt.is_file());
    let ckpt = ckpt.to_string_lossy().into_owned();

    let again = guap(root.path(), &["train-target", "--config", &cfg, "--tag", "again"]);
    assert_eq!(again.code, 0);
    assert_eq!(accuracy_line(&first), accuracy_line(&again));
    let ckpt2 = again.dir.unwrap().join("target.ckpt").to_string_lossy().into_owned();

    let v1 = guap(root.path(), &["attack", "--config", &cfg, "--checkpoint", &ckpt, "--preset", "v1"]);
    assert_eq!(v1.code, 0, "{}", v1.stderr);
    let v1_dir = v1.dir.unwrap();
    assert_eq!(header_budget(&v1_dir.join("perturbation.guap")), (0.04, 0.0));
    assert!(v1_dir.join("train_log.csv").is_file());
    assert!(v1_dir.join("generator.ckpt").is_file());

    let v3 = guap(root.path(), &["attack", "--config", &cfg, "--checkpoint", &ckpt, "--preset", "v3"]);
    assert_eq!(v3.code, 0, "{}", v3.stderr);
    let v3_art = v3.dir.unwrap().join("perturbation.guap");
    assert_eq!(header_budget(&v3_art), (0.04, 0.1));
    let v3_art = v3_art.to_string_lossy().into_owned();

    let ident = guap(
        root.path(),
        &["attack", "--config", &cfg, "--checkpoint", &ckpt, "--epsilon", "0", "--tau", "0"],
    );
    assert_eq!(ident.code, 0, "{}", ident.stderr);
    assert!(ident.stderr.contains("identity"), "{}", ident.stderr);

    let too_big = guap(root.path(), &["attack", "--config", &cfg, "--checkpoint", &ckpt, "--epsilon", "2"]);
    assert_eq!(too_big.code, 1);

    let identity_art = root.path().join("identity.guap");
    let mut p = UniversalPerturbation::identity((3, 8, 8), "convnet4-s0");
    p.budget = AttackBudget::new(0.0, 0.0).unwrap();
    save_perturbation(&p, &identity_art).unwrap();
    let identity_art = identity_art.to_string_lossy().into_owned();
    let eval = guap(
        root.path(),
        &["eval", "--config", &cfg, "--checkpoint", &ckpt, "--perturbation", &identity_art],
    );
    assert_eq!(eval.code, 0, "{}", eval.stderr);
    let csv = std::fs::read_to_string(eval.dir.unwrap().join("eval.csv")).unwrap();
    assert!(csv.lines().any(|l| l == "asr,0.000000"), "{csv}");

    let transfer = guap(
        root.path(),
        &[
            "transfer", "--config", &cfg, "--checkpoint", &ckpt, "--checkpoint", &ckpt2, "--perturbation", &v3_art,
            "--perturbation", &identity_art,
        ],
    );
    assert_eq!(transfer.code, 0, "{}", transfer.stderr);
    let csv = std::fs::read_to_string(transfer.dir.unwrap().join("transfer.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5, "{csv}");
    assert!(lines[3].starts_with("average_with_diagonal"));
    assert!(lines[4].starts_with("average_without_diagonal"));

    let export = guap(root.path(), &["export-images", "--config", &cfg, "--perturbation", &v3_art]);
    assert_eq!(export.code, 0, "{}", export.stderr);
    let pngs = std::fs::read_dir(export.dir.unwrap().join("images")).unwrap().count();
    assert_eq!(pngs, 6);

    let shape_cfg = write_config(
        root.path(),
        "big.toml",
        &TINY.replace("height = 8", "height = 16").replace("width = 8", "width = 16"),
    );
    let mismatch = guap(root.path(), &["export-images", "--config", &shape_cfg, "--perturbation", &v3_art]);
    assert_eq!(mismatch.code, 2);
    assert!(mismatch.stderr.contains("shape"), "{}", mismatch.stderr);
}

#[test]
fn ablate_and_sample_study_write_outputs() {
    let root = tempfile::tempdir().unwrap();
    let text = format!("{TINY}\n[ablate]\nepsilons = [0.0, 0.04]\ntaus = [0.0, 0.1]\n\n[sample_study]\nsizes = [10, 40]\n");
    let cfg = write_config(root.path(), "tiny.toml", &text);
    let target = guap(root.path(), &["train-target", "--config", &cfg]);
    let ckpt = target.dir.unwrap().join("target.ckpt").to_string_lossy().into_owned();

    let ablate = guap(root.path(), &["ablate", "--config", &cfg, "--checkpoint", &ckpt]);
    assert_eq!(ablate.code, 0, "{}", ablate.stderr);
    let dir = ablate.dir.unwrap();
    assert_eq!(std::fs::read_to_string(dir.join("ablation.csv")).unwrap().lines().count(), 5);
    assert!(dir.join("ablation.png").is_file());

    let study = guap(root.path(), &["sample-study", "--config", &cfg, "--checkpoint", &ckpt]);
    assert_eq!(study.code, 0, "{}", study.stderr);
    let dir = study.dir.unwrap();
    assert!(dir.join("sample_study.csv").is_file());
    assert!(dir.join("sample_study.png").is_file());
}
