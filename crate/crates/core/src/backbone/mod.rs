//! Target classifiers and the datasets they are trained on.

mod data;
mod model;
mod synthetic;

pub use data::{
    accuracy, ingest_cifar10, ingest_cifar10_with, ingest_image_folder, train_classifier, write_cifar_batch,
    CifarLayout, ClassifierHyper, ClassifierLog, FolderIngest, LabeledDataset, Split, CIFAR_RECORD_BYTES,
    CIFAR_TEST_FILE, CIFAR_TRAIN_FILES,
};
pub use model::{argmax_rows, build_small_cnn, load_checkpoint, save_checkpoint, ModelSpec, Preset, SmallCnn, TargetModel};
pub use synthetic::{grating_benchmark, GratingSpec};
