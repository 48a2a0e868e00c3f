//! Loss curves, sample grids and the metric table of a workspace.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::artifacts::{
    read_csv, read_toml, require, BackboneManifest, ClassifierManifest, DatasetManifest, EvaluationManifest,
    SynthesisManifest, Workspace, BACKBONE_MANIFEST, CLASSIFIER_MANIFEST, DATA_MANIFEST, EVALUATION_MANIFEST, METRICS,
    SYNTHESIS_MANIFEST,
};
use crate::checkpoint::{list_checkpoints, load_generator, load_manifest};
use crate::data::write_gray;
use crate::fewshot::{render_table, MetricRecord};
use crate::pipeline::generate;
use crate::trainer::TelemetryRow;
use crate::{Error, Result};

/// Latent seed shared by every sample grid, so grids are comparable.
pub const GRID_SEED: u64 = 20_240_601;
/// Grid is `GRID_SIDE × GRID_SIDE` samples.
pub const GRID_SIDE: usize = 4;
const GRID_GAP: usize = 2;

#[derive(Debug, Clone)]
pub struct ReportSummary {
    pub loss_curves: Vec<PathBuf>,
    pub sample_grids: Vec<PathBuf>,
    /// Rendered metric table, when evaluation records exist.
    pub table: Option<String>,
    /// Config hash of every artifact read, keyed by its path.
    pub hashes: BTreeMap<PathBuf, String>,
}

/// Config hashes of every manifest present in `ws`.
pub fn collect_hashes(ws: &Workspace) -> Result<BTreeMap<PathBuf, String>> {
    let mut out = BTreeMap::new();
    let data = ws.data().join(DATA_MANIFEST);
    if data.is_file() {
        out.insert(data.clone(), read_toml::<DatasetManifest>(&data)?.config_hash);
    }
    for (_, dir) in list_checkpoints(&ws.gan().join("checkpoints"))? {
        let m = load_manifest(&dir)?;
        out.insert(dir, m.config_hash);
    }
    let synth = ws.synthetic().join(SYNTHESIS_MANIFEST);
    if synth.is_file() {
        out.insert(synth.clone(), read_toml::<SynthesisManifest>(&synth)?.config_hash);
    }
    let enc = ws.encoder().join(BACKBONE_MANIFEST);
    if enc.is_file() {
        out.insert(enc.clone(), read_toml::<BackboneManifest>(&enc)?.config_hash);
    }
    for dir in classifier_dirs(&ws.finetune())? {
        let path = dir.join(CLASSIFIER_MANIFEST);
        out.insert(path.clone(), read_toml::<ClassifierManifest>(&path)?.config_hash);
    }
    let eval = ws.evaluate().join(EVALUATION_MANIFEST);
    if eval.is_file() {
        out.insert(eval.clone(), read_toml::<EvaluationManifest>(&eval)?.config_hash);
    }
    Ok(out)
}

/// Subdirectories of `root` holding a classifier manifest, sorted.
pub fn classifier_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.join(CLASSIFIER_MANIFEST).is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Renders everything available in `ws` into its report directory.
///
/// Inputs produced under different config hashes are refused unless
/// `force` is set.
pub fn build_report(ws: &Workspace, force: bool) -> Result<ReportSummary> {
    let telemetry_path = require(
        &ws.gan().join(crate::artifacts::TELEMETRY),
        "GAN telemetry",
        "train-gan",
    )?;
    let hashes = collect_hashes(ws)?;
    let mut distinct: Vec<&String> = hashes.values().collect();
    distinct.sort();
    distinct.dedup();
    if distinct.len() > 1 {
        let listing: Vec<String> = hashes
            .iter()
            .map(|(p, h)| format!("{} {}", &h[..h.len().min(12)], p.display()))
            .collect();
        let message = format!("{} distinct hashes:\n  {}", distinct.len(), listing.join("\n  "));
        if !force {
            return Err(Error::HashMismatch(message));
        }
        log::warn!("rendering mixed inputs: {message}");
    }
    let out = ws.report();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let rows: Vec<TelemetryRow> = read_csv(&telemetry_path)?;
    let d_path = out.join("losses_discriminator.svg");
    let g_path = out.join("losses_generator.svg");
    let series =
        |pick: fn(&TelemetryRow) -> f64| rows.iter().map(|r| (r.iteration as f64, pick(r))).collect::<Vec<_>>();
    plot_curves(
        &d_path,
        "Discriminator",
        &[
            ("L_GAN", series(|r| r.d_gan)),
            ("L_FR", series(|r| r.d_fr)),
            ("L_prior", series(|r| r.d_prior)),
            ("objective", series(|r| r.d_objective)),
        ],
    )?;
    plot_curves(
        &g_path,
        "Generator",
        &[
            ("L_GAN", series(|r| r.g_gan)),
            ("L_IR", series(|r| r.g_ir)),
            ("L_MS", series(|r| r.g_ms)),
            ("objective", series(|r| r.g_objective)),
        ],
    )?;

    let mut sample_grids = Vec::new();
    for (iteration, dir) in list_checkpoints(&ws.gan().join("checkpoints"))? {
        let (g, m) = load_generator(&dir)?;
        let images = generate(&g, GRID_SIDE * GRID_SIDE, GRID_SEED, GRID_SIDE * GRID_SIDE)?;
        let path = out.join(format!("samples_iter_{iteration:06}.png"));
        let (pixels, side) = tile(&images, m.model.image_size, GRID_SIDE);
        write_gray(&path, &pixels, side)?;
        sample_grids.push(path);
    }

    let metrics = ws.evaluate().join(METRICS);
    let table = if metrics.is_file() {
        let records: Vec<MetricRecord> = read_csv(&metrics)?;
        let table = render_table(&records)?;
        fs::write(out.join("metrics_table.txt"), &table).map_err(|e| Error::io(&out, e))?;
        Some(table)
    } else {
        None
    };
    Ok(ReportSummary {
        loss_curves: vec![d_path, g_path],
        sample_grids,
        table,
        hashes,
    })
}

/// Square mosaic of `per_row²` images on a white background.
pub fn tile(images: &[Vec<f32>], side: usize, per_row: usize) -> (Vec<f32>, usize) {
    let full = per_row * side + (per_row - 1) * GRID_GAP;
    let mut out = vec![1.0f32; full * full];
    for (i, img) in images.iter().take(per_row * per_row).enumerate() {
        let (gy, gx) = (i / per_row, i % per_row);
        let (oy, ox) = (gy * (side + GRID_GAP), gx * (side + GRID_GAP));
        for y in 0..side {
            let dst = (oy + y) * full + ox;
            out[dst..dst + side].copy_from_slice(&img[y * side..(y + 1) * side]);
        }
    }
    (out, full)
}

fn plot_curves(path: &Path, title: &str, series: &[(&str, Vec<(f64, f64)>)]) -> Result<()> {
    let finite = series.iter().flat_map(|(_, s)| s.iter()).filter(|(_, y)| y.is_finite());
    let (mut x_max, mut y_min, mut y_max) = (1.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in finite {
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if !y_min.is_finite() {
        (y_min, y_max) = (0.0, 1.0);
    }
    let pad = ((y_max - y_min) * 0.05).max(1e-6);
    let plot_err = |e: &dyn std::fmt::Display| Error::format(path, e);
    let root = SVGBackend::new(path, (900, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(64)
        .build_cartesian_2d(0.0..x_max, (y_min - pad)..(y_max + pad))
        .map_err(|e| plot_err(&e))?;
    chart
        .configure_mesh()
        .x_desc("iteration")
        .y_desc("loss")
        .draw()
        .map_err(|e| plot_err(&e))?;
    for (i, (name, points)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(
                points.iter().copied().filter(|(_, y)| y.is_finite()),
                color.stroke_width(1),
            ))
            .map_err(|e| plot_err(&e))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tile_places_images_row_major() {
        let images: Vec<Vec<f32>> = (0..4).map(|i| vec![i as f32 * 0.1; 9]).collect();
        let (px, full) = tile(&images, 3, 2);
        assert_eq!(full, 3 * 2 + GRID_GAP);
        assert_eq!(px[0], 0.0);
        assert_eq!(px[3 + GRID_GAP], 0.1);
        assert_eq!(px[(3 + GRID_GAP) * full], 0.2);
        assert_eq!(px[full * full - 1], 0.3);
        assert_eq!(px[3], 1.0);
    }

    #[test]
    fn curves_render_to_svg() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.svg");
        let s: Vec<(f64, f64)> = (1..50).map(|i| (i as f64, 1.0 / i as f64)).collect();
        plot_curves(&path, "t", &[("a", s.clone()), ("b", vec![(1.0, f64::NAN)])]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg") && text.contains("polyline"));
    }
}
