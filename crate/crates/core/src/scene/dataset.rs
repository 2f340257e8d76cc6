//! On-disk datasets: `images/*.png` plus a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{render, real_render_seed, sample_scene, LabeledImage, SceneConfig, Style};
use crate::detector::BBox;
use crate::error::{Error, Result};
use crate::image_io::{load_png, save_png};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const IMAGE_DIR: &str = "images";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    /// Path relative to the dataset directory.
    pub image: String,
    pub domain: Style,
    pub seed: u64,
    pub boxes: Vec<BBox>,
    pub classes: Vec<usize>,
    /// Which generator produced a translated image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

impl ManifestRecord {
    fn validate(&self, index: usize) -> Result<()> {
        let bad = |message: String| Error::Manifest { index, message };
        if self.boxes.len() != self.classes.len() {
            return Err(bad(format!(
                "{} boxes but {} classes",
                self.boxes.len(),
                self.classes.len()
            )));
        }
        for b in &self.boxes {
            let in_range = b.iter().all(|v| (0.0..=1.0).contains(v));
            if !in_range || b[0] >= b[2] || b[1] >= b[3] {
                return Err(bad(format!("invalid box {b:?}")));
            }
        }
        if self.image.is_empty() {
            return Err(bad("empty image path".into()));
        }
        Ok(())
    }
}

pub fn image_name(seed: u64, style: Style) -> String {
    format!("{IMAGE_DIR}/{seed}_{style}.png")
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(records).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<ManifestRecord> = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    for (i, r) in records.iter().enumerate() {
        r.validate(i)?;
    }
    Ok(records)
}

/// Write images and a manifest describing them. Each entry's record names
/// the file its pixels are written to.
pub fn export_records(dir: &Path, entries: &[(ManifestRecord, &Tensor<f32>)]) -> Result<PathBuf> {
    let images = dir.join(IMAGE_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for (i, (record, pixels)) in entries.iter().enumerate() {
        record.validate(i)?;
        save_png(&dir.join(&record.image), pixels)?;
    }
    let records: Vec<ManifestRecord> = entries.iter().map(|(r, _)| r.clone()).collect();
    let path = dir.join(MANIFEST);
    write_manifest(&path, &records)?;
    Ok(path)
}

/// Export labeled images as `images/<seed>_<style>.png` plus `manifest.json`.
pub fn export_dataset(images: &[LabeledImage], dir: &Path) -> Result<PathBuf> {
    let entries: Vec<(ManifestRecord, &Tensor<f32>)> = images
        .iter()
        .map(|img| {
            (
                ManifestRecord {
                    image: image_name(img.seed, img.domain),
                    domain: img.domain,
                    seed: img.seed,
                    boxes: img.boxes.clone(),
                    classes: img.classes.clone(),
                    provenance: None,
                },
                &img.pixels,
            )
        })
        .collect();
    export_records(dir, &entries)
}

/// Sample the scenes for `seeds`, render each in every requested style and
/// export them. Two styles give a paired dataset.
pub fn generate_dataset(dir: &Path, seeds: &[u64], styles: &[Style], config: &SceneConfig) -> Result<PathBuf> {
    let mut images = Vec::with_capacity(seeds.len() * styles.len());
    for &seed in seeds {
        let scene = sample_scene(seed, config)?;
        for &style in styles {
            images.push(render(&scene, style, real_render_seed(seed))?);
        }
    }
    export_dataset(&images, dir)
}

/// Read a dataset directory back into labeled images.
pub fn load_dataset(dir: &Path) -> Result<Vec<LabeledImage>> {
    let records = read_manifest(&dir.join(MANIFEST))?;
    let mut out = Vec::with_capacity(records.len());
    let mut size: Option<Vec<usize>> = None;
    for (index, r) in records.into_iter().enumerate() {
        let pixels = load_png(&dir.join(&r.image)).map_err(|e| Error::Manifest {
            index,
            message: e.to_string(),
        })?;
        match &size {
            Some(s) if s.as_slice() != pixels.shape() => {
                return Err(Error::Manifest {
                    index,
                    message: format!("image shape {:?} differs from {:?}", pixels.shape(), s),
                })
            }
            None => size = Some(pixels.shape().to_vec()),
            _ => {}
        }
        out.push(LabeledImage {
            pixels,
            boxes: r.boxes,
            classes: r.classes,
            domain: r.domain,
            seed: r.seed,
        });
    }
    Ok(out)
}
