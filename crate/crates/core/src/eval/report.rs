use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use super::EvalReport;
use crate::detector::Detections;
use crate::error::{Error, Result};
use crate::image_io::save_png;
use crate::tensor::Tensor;

/// Overlay strips written per report.
pub const OVERLAY_COUNT: usize = 8;

const BOX_COLORS: [[f32; 3]; 6] = [
    [1.0, 0.1, 0.1],
    [0.1, 0.9, 0.1],
    [0.2, 0.4, 1.0],
    [1.0, 0.9, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
];

/// Copy of `img` with a one-pixel outline per detection, colored by class.
pub fn draw_detections(img: &Tensor<f32>, dets: &Detections) -> Tensor<f32> {
    let mut out = img.clone();
    let s = img.shape();
    let (h, w) = (s[1], s[2]);
    let data = out.data_mut();
    for (b, &class) in dets.boxes.iter().zip(&dets.classes) {
        let color = BOX_COLORS[class % BOX_COLORS.len()];
        let to_px = |v: f64, n: usize| ((v * n as f64).round() as isize).clamp(0, n as isize - 1) as usize;
        let (y0, x0, y1, x1) = (to_px(b[0], h), to_px(b[1], w), to_px(b[2], h), to_px(b[3], w));
        let mut set = |y: usize, x: usize| {
            for (c, &v) in color.iter().enumerate() {
                data[c * h * w + y * w + x] = v;
            }
        };
        for x in x0..=x1 {
            set(y0, x);
            set(y1, x);
        }
        for y in y0..=y1 {
            set(y, x0);
            set(y, x1);
        }
    }
    out
}

/// `[original | translated | translated with detections]`, width `3W`.
pub fn overlay_strip(original: &Tensor<f32>, translated: &Tensor<f32>, dets: &Detections) -> Result<Tensor<f32>> {
    if original.shape() != translated.shape() || original.rank() != 3 {
        return Err(Error::Shape(format!(
            "overlay needs two equal [C, H, W] images, got {:?} and {:?}",
            original.shape(),
            translated.shape()
        )));
    }
    let drawn = draw_detections(translated, dets);
    let s = original.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let panels = [original.data(), translated.data(), drawn.data()];
    let mut data = Vec::with_capacity(c * h * 3 * w);
    for ch in 0..c {
        for y in 0..h {
            for p in &panels {
                let row = ch * h * w + y * w;
                data.extend_from_slice(&p[row..row + w]);
            }
        }
    }
    Tensor::new(&[c, h, 3 * w], data)
}

/// Write `report.json`, `summary.csv` and up to [`OVERLAY_COUNT`] strips
/// into `dir`. Returns the written paths.
pub fn emit_report(
    report: &EvalReport,
    originals: &[Tensor<f32>],
    translated: &[Tensor<f32>],
    detections: &[Detections],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let overlay_dir = dir.join("overlays");
    fs::create_dir_all(&overlay_dir).map_err(|e| Error::io(&overlay_dir, e))?;
    let mut written = Vec::new();

    let json_path = dir.join("report.json");
    let json = serde_json::to_vec_pretty(report).map_err(|e| Error::Json {
        path: json_path.clone(),
        source: e,
    })?;
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    written.push(json_path);

    let csv_path = dir.join("summary.csv");
    let mut csv = Vec::new();
    writeln!(csv, "metric,value").expect("write to vec");
    for (name, value) in report.metrics() {
        writeln!(csv, "{name},{value}").expect("write to vec");
    }
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    written.push(csv_path);

    let n = OVERLAY_COUNT.min(originals.len()).min(translated.len()).min(detections.len());
    for i in 0..n {
        let strip = overlay_strip(&originals[i], &translated[i], &detections[i])?;
        let path = overlay_dir.join(format!("{i:02}.png"));
        save_png(&path, &strip)?;
        written.push(path);
    }
    Ok(written)
}
