//! Class-per-folder chip datasets and grayscale raster files.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crgan_core::raster;
use image::{GrayImage, ImageReader, Luma};

use super::{Dataset, ImageChip, Split};
use crate::{Error, Result};

/// Optional file in a dataset root assigning chips to splits, one
/// `relative/path,split` record per line. Unlisted chips are training chips.
pub const SPLIT_MANIFEST: &str = "splits.csv";
/// Optional file in a dataset root listing class folders in label order, one
/// per line. Without it, labels follow sorted folder names.
pub const CLASS_LIST: &str = "classes.txt";

const EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];

/// Decodes any supported raster into row-major luma in [0, 255] with its
/// `(width, height)`.
pub(crate) fn read_luma(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::format(path, e))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.into_raw(), w, h))
}

/// Reads a raster, center-crops it to a square and resizes to `image_size`,
/// returning values in [−1, 1].
pub fn read_gray(path: &Path, image_size: usize) -> Result<Vec<f32>> {
    let (luma, w, h) = read_luma(path)?;
    let side = w.min(h);
    if side == 0 {
        return Err(Error::format(path, "empty image"));
    }
    let (x0, y0) = ((w - side) / 2, (h - side) / 2);
    let mut square = Vec::with_capacity(side * side);
    for r in 0..side {
        let row = (y0 + r) * w + x0;
        square.extend(luma[row..row + side].iter().map(|&v| raster::normalize_u8(v)));
    }
    if side == image_size {
        return Ok(square);
    }
    Ok(raster::resize(&square, side, image_size)?)
}

/// Writes a square [−1, 1] image as an 8-bit grayscale PNG.
pub fn write_gray(path: &Path, pixels: &[f32], side: usize) -> Result<()> {
    if pixels.len() != side * side {
        return Err(Error::Validation(format!(
            "{} pixels is not {side}x{side}",
            pixels.len()
        )));
    }
    let img = GrayImage::from_fn(side as u32, side as u32, |x, y| {
        Luma([raster::denormalize_u8(pixels[y as usize * side + x as usize])])
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn is_raster(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn read_split_manifest(path: &Path) -> Result<HashMap<String, Split>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (n == 0 && line == "path,split") {
            continue;
        }
        let (file, split) = line
            .rsplit_once(',')
            .ok_or_else(|| Error::format(path, format!("line {}: expected `path,split`", n + 1)))?;
        let split = Split::parse(split)
            .ok_or_else(|| Error::format(path, format!("line {}: unknown split {split:?}", n + 1)))?;
        map.insert(file.trim().replace('\\', "/"), split);
    }
    Ok(map)
}

/// Loads a dataset laid out as one subdirectory per class under `root`.
///
/// Classes and files are taken in sorted order, so labels and chip order are
/// stable across runs. Unreadable files are skipped with a warning.
pub fn load_chip_dataset(root: &Path, image_size: usize) -> Result<Dataset> {
    if image_size == 0 {
        return Err(Error::Config("image_size must be positive".into()));
    }
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found"),
        ));
    }
    let manifest_path = root.join(SPLIT_MANIFEST);
    let splits = if manifest_path.is_file() {
        read_split_manifest(&manifest_path)?
    } else {
        HashMap::new()
    };
    let class_list = root.join(CLASS_LIST);
    let class_dirs: Vec<PathBuf> = if class_list.is_file() {
        let text = fs::read_to_string(&class_list).map_err(|e| Error::io(&class_list, e))?;
        let dirs: Vec<PathBuf> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| root.join(l))
            .collect();
        if let Some(missing) = dirs.iter().find(|d| !d.is_dir()) {
            return Err(Error::format(
                &class_list,
                format!("no class folder {}", missing.display()),
            ));
        }
        dirs
    } else {
        sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect()
    };
    if class_dirs.is_empty() {
        return Err(Error::Validation(format!("{} has no class folders", root.display())));
    }
    let mut class_names = Vec::with_capacity(class_dirs.len());
    let mut chips = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let before = chips.len();
        for file in sorted_entries(dir)?.into_iter().filter(|p| p.is_file() && is_raster(p)) {
            let pixels = match read_gray(&file, image_size) {
                Ok(p) => p,
                Err(e) => {
                    log::warn!("skipping {}: {e}", file.display());
                    continue;
                }
            };
            let stem = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let key = format!("{name}/{stem}");
            let split = splits.get(&key).copied().unwrap_or(Split::Train);
            chips.push(ImageChip::new(pixels, image_size, label, split, key)?);
        }
        if chips.len() == before {
            return Err(Error::Validation(format!(
                "class folder {} has no readable images",
                dir.display()
            )));
        }
        class_names.push(name);
    }
    Ok(Dataset {
        chips,
        class_names,
        image_size,
    })
}

/// Writes `dataset` in the layout read by [`load_chip_dataset`], including
/// the class list and split manifest.
pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    dataset.validate()?;
    let mut manifest = String::from("path,split\n");
    for name in &dataset.class_names {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut used: HashMap<String, usize> = HashMap::new();
    for chip in &dataset.chips {
        let class = &dataset.class_names[chip.label];
        let base = Path::new(&chip.source)
            .file_stem()
            .and_then(|s| s.to_str())
            .filter(|s| !s.is_empty())
            .unwrap_or("chip")
            .to_string();
        let n = used.entry(format!("{class}/{base}")).or_insert(0);
        let file = if *n == 0 {
            format!("{base}.png")
        } else {
            format!("{base}_{n}.png")
        };
        *n += 1;
        write_gray(&root.join(class).join(&file), &chip.pixels, chip.side)?;
        manifest.push_str(&format!("{class}/{file},{}\n", chip.split.as_str()));
    }
    let classes = root.join(CLASS_LIST);
    fs::write(&classes, dataset.class_names.join("\n") + "\n").map_err(|e| Error::io(&classes, e))?;
    let path = root.join(SPLIT_MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_within_one_level() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let px: Vec<f32> = (0..64).map(|i| i as f32 / 32.0 - 1.0).collect();
        write_gray(&path, &px, 8).unwrap();
        let back = read_gray(&path, 8).unwrap();
        for (a, b) in px.iter().zip(&back) {
            assert!((a - b).abs() <= 2.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn non_square_images_are_center_cropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wide.png");
        let img = GrayImage::from_fn(6, 2, |x, _| Luma([if (2..4).contains(&x) { 255 } else { 0 }]));
        img.save(&path).unwrap();
        assert_eq!(read_gray(&path, 2).unwrap(), vec![1.0; 4]);
    }
}
