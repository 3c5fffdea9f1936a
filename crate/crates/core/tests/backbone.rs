use std::path::Path;

use guap::backbone::{
    accuracy, build_small_cnn, ingest_cifar10, ingest_cifar10_with, ingest_image_folder, load_checkpoint,
    save_checkpoint, CifarLayout, Preset, Split, TargetModel, CIFAR_RECORD_BYTES, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES,
};
use guap::error::GuapError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Writes `records` CIFAR binary records per file. Record `i` of each file
/// has label `i % 10` and every pixel byte equal to `(i + file) % 256`.
fn write_fixture(dir: &Path, records: usize) {
    let names = CIFAR_TRAIN_FILES.iter().chain([&CIFAR_TEST_FILE]);
    for (f, name) in names.enumerate() {
        let mut bytes = Vec::with_capacity(records * CIFAR_RECORD_BYTES);
        for i in 0..records {
            bytes.push((i % 10) as u8);
            bytes.extend(std::iter::repeat_n(((i + f) % 256) as u8, CIFAR_RECORD_BYTES - 1));
        }
        std::fs::write(dir.join(name), bytes).unwrap();
    }
}

#[test]
fn standard_layout_yields_fifty_and_ten_thousand() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), CifarLayout::STANDARD.records_per_file);
    let (train, test) = ingest_cifar10(dir.path()).unwrap();
    assert_eq!(train.len(), 50_000);
    assert_eq!(test.len(), 10_000);
    assert_eq!(train.image_dims(), (3, 32, 32));
    assert_eq!(train.split(), Split::Train);
    assert_eq!(test.split(), Split::HeldOut);
    assert_eq!(train.labels()[0], 0);
    assert_eq!(train.labels()[13], 3);
    assert_eq!(train.images().data()[[13, 2, 31, 31]], 13.0 / 255.0);
    // First record of the second training file.
    assert_eq!(train.images().data()[[10_000, 0, 0, 0]], 1.0 / 255.0);
}

#[test]
fn truncated_file_reports_path_and_length() {
    let dir = tempfile::tempdir().unwrap();
    let layout = CifarLayout { records_per_file: 4 };
    write_fixture(dir.path(), 4);
    let victim = dir.path().join(CIFAR_TRAIN_FILES[2]);
    let bytes = std::fs::read(&victim).unwrap();
    std::fs::write(&victim, &bytes[..bytes.len() - 7]).unwrap();
    match ingest_cifar10_with(dir.path(), layout) {
        Err(e @ GuapError::Truncated { .. }) => {
            let GuapError::Truncated { path, expected, found } = &e else { unreachable!() };
            assert_eq!(path, &victim);
            assert_eq!(*expected, (4 * CIFAR_RECORD_BYTES) as u64);
            assert_eq!(*found, (4 * CIFAR_RECORD_BYTES - 7) as u64);
            assert!(e.to_string().contains(CIFAR_TRAIN_FILES[2]));
        }
        other => panic!("expected truncation, got {other:?}"),
    }
}

#[test]
fn missing_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), 2);
    std::fs::remove_file(dir.path().join(CIFAR_TEST_FILE)).unwrap();
    match ingest_cifar10_with(dir.path(), CifarLayout { records_per_file: 2 }) {
        Err(GuapError::MissingFile(p)) => assert!(p.ends_with(CIFAR_TEST_FILE)),
        other => panic!("expected missing file, got {other:?}"),
    }
}

#[test]
fn bad_label_is_malformed() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), 2);
    let victim = dir.path().join(CIFAR_TRAIN_FILES[0]);
    let mut bytes = std::fs::read(&victim).unwrap();
    bytes[CIFAR_RECORD_BYTES] = 10;
    std::fs::write(&victim, bytes).unwrap();
    assert!(matches!(
        ingest_cifar10_with(dir.path(), CifarLayout { records_per_file: 2 }),
        Err(GuapError::Malformed { .. })
    ));
}

fn write_png(path: &Path, colour: [u8; 3]) {
    image::RgbImage::from_pixel(5, 7, image::Rgb(colour)).save(path).unwrap();
}

#[test]
fn image_folder_orders_classes_and_skips_junk() {
    let dir = tempfile::tempdir().unwrap();
    for (k, class) in ["bird", "cat"].iter().enumerate() {
        let d = dir.path().join(class);
        std::fs::create_dir(&d).unwrap();
        for i in 0..3 {
            write_png(&d.join(format!("{i}.png")), [k as u8 * 200, 10 * i as u8, 0]);
        }
    }
    std::fs::write(dir.path().join("cat").join("notes.txt"), "not an image").unwrap();
    let out = ingest_image_folder(dir.path(), (8, 8), None, Split::HeldOut).unwrap();
    assert_eq!(out.class_names, ["bird", "cat"]);
    assert_eq!(out.dataset.labels(), [0, 0, 0, 1, 1, 1]);
    assert_eq!(out.dataset.image_dims(), (3, 8, 8));
    assert_eq!(out.skipped, 1);
    assert_eq!(out.dataset.images().data()[[4, 0, 3, 3]], 200.0 / 255.0);
    assert_eq!(out.dataset.images().data()[[4, 1, 3, 3]], 10.0 / 255.0);

    let capped = ingest_image_folder(dir.path(), (8, 8), Some(2), Split::HeldOut).unwrap();
    assert_eq!(capped.dataset.len(), 4);
}

#[test]
fn image_folder_cap_of_ten() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("only");
    std::fs::create_dir(&d).unwrap();
    for i in 0..12 {
        write_png(&d.join(format!("{i:02}.png")), [i as u8, 0, 0]);
    }
    let out = ingest_image_folder(dir.path(), (4, 4), Some(10), Split::Train).unwrap();
    assert_eq!(out.dataset.len(), 10);
    assert_eq!(out.dataset.images().data()[[9, 0, 0, 0]], 9.0 / 255.0);
}

#[test]
fn empty_class_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("a")).unwrap();
    write_png(&dir.path().join("a").join("x.png"), [1, 2, 3]);
    std::fs::create_dir(dir.path().join("b")).unwrap();
    match ingest_image_folder(dir.path(), (4, 4), None, Split::Train) {
        Err(GuapError::Malformed { path, .. }) => assert!(path.ends_with("b")),
        other => panic!("expected malformed, got {other:?}"),
    }
}

#[test]
fn untrained_model_is_near_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 2000;
    let images = ndarray::Array4::from_shape_simple_fn((n, 3, 16, 16), || rng.random_range(0.0..1.0f32));
    let labels = (0..n).map(|_| rng.random_range(0..10)).collect();
    let data = guap::backbone::LabeledDataset::new(
        guap::flowwarp::ImageBatch::new(images).unwrap(),
        labels,
        10,
        Split::HeldOut,
    )
    .unwrap();
    let model = build_small_cnn(Preset::Convnet4, 4, (3, 16, 16), 10).unwrap();
    let acc = accuracy(&model, &data);
    assert!((acc - 0.1).abs() <= 0.03, "accuracy {acc}");
}

#[test]
fn reloaded_checkpoint_predicts_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let images = ndarray::Array4::from_shape_simple_fn((64, 3, 16, 16), || rng.random_range(0.0..1.0f32));
    let data = guap::backbone::LabeledDataset::new(
        guap::flowwarp::ImageBatch::new(images).unwrap(),
        (0..64).map(|i| i % 10).collect(),
        10,
        Split::HeldOut,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    for preset in Preset::ALL {
        let model = build_small_cnn(preset, 1, (3, 16, 16), 10).unwrap();
        let path = dir.path().join(format!("{preset}.ckpt"));
        save_checkpoint(&path, &model).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.id(), model.id());
        assert_eq!(back.param_digest(), model.param_digest());
        assert_eq!(accuracy(&back, &data), accuracy(&model, &data));
        assert_eq!(back.logits(data.images().data()), model.logits(data.images().data()));
    }
}
