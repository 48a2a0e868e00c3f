//! Ship chips cut from large scenes annotated with rotated boxes.
//!
//! Annotations use the common four-corner text format, one target per line:
//!
//! ```text
//! x1 y1 x2 y2 x3 y3 x4 y4 class difficult
//! ```
//!
//! Header lines such as `imagesource:` or `gsd:` are ignored. Each box is
//! cut out as its minimum enclosing square, zero-padded where it leaves the
//! scene, and resized to the chip size.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crgan_core::geometry::{crop_min_square, RotatedBox};
use crgan_core::raster;

use super::io::read_luma;
use super::{Dataset, ImageChip, Split};
use crate::{Error, Result};

/// One annotated target.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub corners: [(f64, f64); 4],
    pub class_name: String,
    pub difficult: bool,
}

impl Annotation {
    /// Rotated box through the corners: centre at their mean, width along
    /// the first edge, height along the second.
    pub fn to_box(&self, class_id: usize) -> Result<RotatedBox> {
        let c = &self.corners;
        let cx = c.iter().map(|p| p.0).sum::<f64>() / 4.0;
        let cy = c.iter().map(|p| p.1).sum::<f64>() / 4.0;
        let w = (c[1].0 - c[0].0).hypot(c[1].1 - c[0].1);
        let h = (c[2].0 - c[1].0).hypot(c[2].1 - c[1].1);
        let theta = (c[1].1 - c[0].1).atan2(c[1].0 - c[0].0);
        Ok(RotatedBox::new(cx, cy, w, h, theta, class_id)?)
    }
}

/// Parses an annotation file's text. `path` is only used in messages.
pub fn parse_annotations(text: &str, path: &Path) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.contains(':') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 9 {
            return Err(Error::format(
                path,
                format!("line {}: expected 8 coordinates and a class", n + 1),
            ));
        }
        let mut xy = [0.0f64; 8];
        for (slot, field) in xy.iter_mut().zip(&fields[..8]) {
            *slot = field
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: bad coordinate {field:?}", n + 1)))?;
        }
        out.push(Annotation {
            corners: [(xy[0], xy[1]), (xy[2], xy[3]), (xy[4], xy[5]), (xy[6], xy[7])],
            class_name: fields[8].to_string(),
            difficult: fields.get(9).is_some_and(|d| *d == "1"),
        });
    }
    Ok(out)
}

/// Cuts one box out of a luma scene and returns a chip in [−1, 1].
/// Padding outside the scene is black.
pub fn crop_chip(scene: &[u8], width: usize, height: usize, b: &RotatedBox, image_size: usize) -> Result<Vec<f32>> {
    let unit: Vec<f32> = scene.iter().map(|&v| v as f32 / 255.0).collect();
    let patch = crop_min_square(&unit, width, height, b)?;
    let resized = raster::resize(&patch.pixels, patch.side, image_size)?;
    Ok(resized.into_iter().map(|v| (2.0 * v - 1.0).clamp(-1.0, 1.0)).collect())
}

fn scene_for(images: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "jpg", "jpeg", "bmp", "tif", "tiff"]
        .iter()
        .map(|ext| images.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

/// Imports every annotated scene. Annotation files in `labels` are matched
/// to scenes in `images` by file stem. Classes are numbered in sorted name
/// order; all chips go to `split`.
pub fn import_scenes(images: &Path, labels: &Path, image_size: usize, split: Split) -> Result<Dataset> {
    let mut files: Vec<PathBuf> = fs::read_dir(labels)
        .map_err(|e| Error::io(labels, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    files.sort();
    let mut scenes = Vec::with_capacity(files.len());
    for file in &files {
        let text = fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
        scenes.push((file, parse_annotations(&text, file)?));
    }
    let names: BTreeSet<&str> = scenes
        .iter()
        .flat_map(|(_, a)| a.iter().map(|a| a.class_name.as_str()))
        .collect();
    let class_names: Vec<String> = names.into_iter().map(String::from).collect();
    let mut chips = Vec::new();
    for (file, annotations) in &scenes {
        if annotations.is_empty() {
            continue;
        }
        let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let Some(scene_path) = scene_for(images, stem) else {
            log::warn!("no scene image for {}", file.display());
            continue;
        };
        let (luma, w, h) = read_luma(&scene_path)?;
        for (i, a) in annotations.iter().enumerate() {
            let label = class_names.binary_search(&a.class_name).expect("class collected above");
            let b = a.to_box(label)?;
            match crop_chip(&luma, w, h, &b, image_size) {
                Ok(px) => chips.push(ImageChip::new(px, image_size, label, split, format!("{stem}_{i:03}"))?),
                Err(e) => log::warn!("skipping box {i} of {}: {e}", file.display()),
            }
        }
    }
    if chips.is_empty() {
        return Err(Error::Validation(format!(
            "no chips imported from {}",
            labels.display()
        )));
    }
    Ok(Dataset {
        chips,
        class_names,
        image_size,
    })
}
