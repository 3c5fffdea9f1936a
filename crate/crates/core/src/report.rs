//! CSV tables and PNG figures for evaluation outputs.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::ArrayView3;

use crate::backbone::LabeledDataset;
use crate::error::{ensure, GuapError, Result};
use crate::evaluation::{AblationGrid, EvalReport, SamplePoint, TransferMatrix};
use crate::persist::hex;
use crate::trainer::{TrainLog, UniversalPerturbation};

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| GuapError::io(dir, e))?;
    }
    let f = fs::File::create(path).map_err(|e| GuapError::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| GuapError::io(path, e))
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "invalid".to_string(), |v| format!("{v:.6}"))
}

pub fn write_train_log_csv(path: &Path, log: &TrainLog) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["epoch", "mean_loss", "train_asr", "val_asr", "seconds"])?;
    for e in &log.epochs {
        w.write_record([
            e.epoch.to_string(),
            format!("{:.6}", e.mean_loss),
            format!("{:.6}", e.train_asr),
            e.val_asr.map_or_else(String::new, |v| format!("{v:.6}")),
            format!("{:.3}", e.seconds),
        ])?;
    }
    finish(w, path)
}

/// One `metric,value` row per scalar, then one row per class.
pub fn write_eval_csv(path: &Path, r: &EvalReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["metric", "value"])?;
    let rows = [
        ("num_images", r.num_images.to_string()),
        ("asr", format!("{:.6}", r.asr)),
        ("asr_initially_correct", format!("{:.6}", r.asr_initially_correct)),
        ("clean_accuracy", format!("{:.6}", r.clean_accuracy)),
        ("adversarial_accuracy", format!("{:.6}", r.adversarial_accuracy)),
        ("l2_mean", format!("{:.6}", r.l2.mean)),
        ("l2_median", format!("{:.6}", r.l2.median)),
        ("l2_max", format!("{:.6}", r.l2.max)),
    ];
    for (k, v) in rows {
        w.write_record([k.to_string(), v])?;
    }
    for (k, v) in r.per_class_asr.iter().enumerate() {
        w.write_record([format!("asr_class_{k}"), v.map_or_else(String::new, |v| format!("{v:.6}"))])?;
    }
    finish(w, path)
}

pub fn write_l2_values_csv(path: &Path, r: &EvalReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["image", "l2"])?;
    for (i, v) in r.l2.values.iter().enumerate() {
        w.write_record([i.to_string(), format!("{v:.6}")])?;
    }
    finish(w, path)
}

/// Matrix rows per source model, followed by both column-average rows.
pub fn write_transfer_csv(path: &Path, m: &TransferMatrix) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["source".to_string()];
    header.extend(m.victims.iter().cloned());
    w.write_record(&header)?;
    for (src, row) in m.sources.iter().zip(&m.asr) {
        let mut rec = vec![src.clone()];
        rec.extend(row.iter().map(|&v| cell(v)));
        w.write_record(&rec)?;
    }
    for (label, avg) in [
        ("average_with_diagonal", m.average_with_diagonal()),
        ("average_without_diagonal", m.average_without_diagonal()),
    ] {
        let mut rec = vec![label.to_string()];
        rec.extend(avg.into_iter().map(cell));
        w.write_record(&rec)?;
    }
    finish(w, path)
}

pub fn write_ablation_csv(path: &Path, g: &AblationGrid) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["tau", "epsilon", "asr"])?;
    for (tau, row) in g.taus.iter().zip(&g.asr) {
        for (eps, &v) in g.epsilons.iter().zip(row) {
            w.write_record([tau.to_string(), eps.to_string(), cell(v)])?;
        }
    }
    finish(w, path)
}

pub fn write_sample_study_csv(path: &Path, points: &[SamplePoint]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["size", "asr", "subset_digest"])?;
    for p in points {
        w.write_record([p.size.to_string(), format!("{:.6}", p.asr), hex(&p.subset_digest)])?;
    }
    finish(w, path)
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| GuapError::io(dir, e))?;
    }
    img.save(path)?;
    Ok(())
}

/// Blue-to-yellow ramp for values in `[0, 1]`.
fn ramp(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    Rgb([lerp(40.0, 250.0), lerp(30.0, 220.0), lerp(120.0, 40.0)])
}

/// Grid cells as `cell_px` squares, rows following `taus` top to bottom.
pub fn write_ablation_heatmap(path: &Path, g: &AblationGrid, cell_px: u32) -> Result<()> {
    ensure!(cell_px >= 1, "cell size must be positive");
    let (rows, cols) = (g.taus.len() as u32, g.epsilons.len() as u32);
    let img = RgbImage::from_fn(cols * cell_px, rows * cell_px, |x, y| {
        match g.asr[(y / cell_px) as usize][(x / cell_px) as usize] {
            Some(v) => ramp(v),
            None => Rgb([128, 128, 128]),
        }
    });
    save_png(&img, path)
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

/// Line chart of each series on shared axes: x spans the data range, y is `[0, y_max]`.
pub fn write_curves_png(path: &Path, series: &[Vec<(f64, f64)>], y_max: f64) -> Result<()> {
    ensure!(!series.is_empty() && series.iter().all(|s| !s.is_empty()), "curves need data");
    let (width, height, margin) = (480u32, 320u32, 24u32);
    let xs = series.iter().flatten().map(|p| p.0);
    let x_min = xs.clone().fold(f64::INFINITY, f64::min);
    let x_max = xs.fold(f64::NEG_INFINITY, f64::max);
    let x_span = if x_max > x_min { x_max - x_min } else { 1.0 };
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let (pw, ph) = ((width - 2 * margin) as f64, (height - 2 * margin) as f64);
    let to_px = |(x, y): (f64, f64)| {
        let px = margin as f64 + (x - x_min) / x_span * pw;
        let py = (height - margin) as f64 - (y / y_max).clamp(0.0, 1.0) * ph;
        (px, py)
    };
    for x in margin..=width - margin {
        img.put_pixel(x, height - margin, Rgb([0, 0, 0]));
    }
    for y in margin..=height - margin {
        img.put_pixel(margin, y, Rgb([0, 0, 0]));
    }
    for (k, s) in series.iter().enumerate() {
        let colour = Rgb(PALETTE[k % PALETTE.len()]);
        let pts: Vec<(f64, f64)> = s.iter().copied().map(to_px).collect();
        for pair in pts.windows(2) {
            draw_segment(&mut img, pair[0], pair[1], colour);
        }
        for &(px, py) in &pts {
            for dy in -2i32..=2 {
                for dx in -2i32..=2 {
                    put(&mut img, px as i32 + dx, py as i32 + dy, colour);
                }
            }
        }
    }
    save_png(&img, path)
}

fn put(img: &mut RgbImage, x: i32, y: i32, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn draw_segment(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        put(img, (a.0 + (b.0 - a.0) * t).round() as i32, (a.1 + (b.1 - a.1) * t).round() as i32, c);
    }
}

/// `(c, h, w)` in `[0, 1]` as an RGB image, each pixel repeated `scale` times.
fn to_rgb(img: ArrayView3<f32>, scale: u32) -> RgbImage {
    let (c, h, w) = img.dim();
    RgbImage::from_fn(w as u32 * scale, h as u32 * scale, |x, y| {
        let (i, j) = ((y / scale) as usize, (x / scale) as usize);
        let px = |k: usize| (img[[k.min(c - 1), i, j]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

/// Write `clean`, `warped` and `final` PNGs for the first `count` images.
pub fn export_triplets(
    dir: &Path,
    p: &UniversalPerturbation,
    data: &LabeledDataset,
    count: usize,
    scale: u32,
) -> Result<Vec<PathBuf>> {
    p.check_fits(data.image_dims())?;
    ensure!(scale >= 1, "scale must be positive");
    let n = count.min(data.len());
    ensure!(n >= 1, "nothing to export");
    let sel = data.prefix(n)?;
    let clean = sel.images().data();
    let warped = p.warp_only_view(clean.view()).mapv(|v| v.clamp(0.0, 1.0));
    let adv = p.apply_view(clean.view());
    let mut written = Vec::with_capacity(3 * n);
    for i in 0..n {
        for (tag, batch) in [("clean", clean), ("warped", &warped), ("final", &adv)] {
            let path = dir.join(format!("sample{i:03}_{tag}.png"));
            save_png(&to_rgb(batch.index_axis(ndarray::Axis(0), i), scale), &path)?;
            written.push(path);
        }
    }
    Ok(written)
}
