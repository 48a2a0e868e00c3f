//! Procedural SAR-like chips for running the pipeline without restricted data.
//!
//! Each class is one bright geometric target on a dark clutter background.
//! The reflectivity map is rotated, shifted and scaled per chip, multiplied
//! by speckle and log-compressed to decibels before being
//! mapped into [−1, 1].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use super::{Dataset, ImageChip, Split};
use crate::{Error, Result};

/// Class names, one per target shape.
pub const SHAPES: [&str; 10] = [
    "bar", "ellipse", "cross", "chevron", "ring", "ell", "tee", "twin", "triangle", "frame",
];

/// Rendering parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub image_size: usize,
    /// Half-width of the uniform orientation jitter around each class's
    /// canonical pose, in radians.
    pub max_rotation: f64,
    /// Maximum centre offset as a fraction of the side.
    pub max_shift: f64,
    /// Relative size jitter.
    pub scale_jitter: f64,
    /// Number of looks of the Gamma speckle; one look is exponential.
    pub looks: f64,
    pub background: f64,
    pub target: f64,
    /// Decibel window mapped onto [−1, 1].
    pub db_range: (f64, f64),
}

impl ToyConfig {
    pub fn new(image_size: usize) -> Self {
        Self {
            image_size,
            max_rotation: 0.5,
            max_shift: 0.08,
            scale_jitter: 0.15,
            looks: 1.0,
            background: 0.01,
            target: 1.0,
            db_range: (-20.0, 5.0),
        }
    }
}

/// Whether `(u, v)`, in target coordinates with the target spanning about
/// [−1, 1], lies on the shape of `class`.
fn inside(class: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    let r2 = u * u + v * v;
    match class % SHAPES.len() {
        0 => au < 0.9 && av < 0.2,
        1 => (u / 0.8).powi(2) + (v / 0.45).powi(2) < 1.0,
        2 => (au < 0.8 && av < 0.15) || (av < 0.8 && au < 0.15),
        3 => au < 0.8 && (v - 0.9 * au + 0.3).abs() < 0.17,
        4 => (0.45 * 0.45..0.75 * 0.75).contains(&r2),
        5 => ((-0.7..0.7).contains(&u) && (0.45..0.75).contains(&v)) || ((-0.75..-0.45).contains(&u) && av < 0.75),
        6 => (au < 0.8 && (0.5..0.8).contains(&v)) || (au < 0.15 && (-0.8..0.8).contains(&v)),
        7 => (u - 0.5).powi(2) + v * v < 0.09 || (u + 0.5).powi(2) + v * v < 0.09,
        8 => v > -0.6 && v < 0.8 - 1.6 * au,
        _ => {
            let m = au.max(av);
            m > 0.45 && m < 0.75
        }
    }
}

/// Renders one chip of `class`.
pub fn render_chip<R: Rng + ?Sized>(class: usize, cfg: &ToyConfig, rng: &mut R) -> Result<Vec<f32>> {
    let s = cfg.image_size;
    let theta = rng.random_range(-cfg.max_rotation..=cfg.max_rotation) + class as f64 * 0.7;
    let shift = cfg.max_shift * s as f64;
    let (dx, dy) = (rng.random_range(-shift..=shift), rng.random_range(-shift..=shift));
    let scale = 0.3 * s as f64 * (1.0 + rng.random_range(-cfg.scale_jitter..=cfg.scale_jitter));
    let (sin, cos) = theta.sin_cos();
    let c = s as f64 / 2.0;
    let speckle = Gamma::new(cfg.looks, 1.0 / cfg.looks).map_err(|e| Error::Config(e.to_string()))?;
    let (lo, hi) = cfg.db_range;
    let mut out = Vec::with_capacity(s * s);
    for row in 0..s {
        for col in 0..s {
            // 2x2 supersampling softens the target edges.
            let mut cover = 0.0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let x = col as f64 + ox - c - dx;
                let y = row as f64 + oy - c - dy;
                let u = (x * cos + y * sin) / scale;
                let v = (-x * sin + y * cos) / scale;
                if inside(class, u, v) {
                    cover += 0.25;
                }
            }
            let reflectivity = cfg.background + cover * cfg.target;
            let intensity = reflectivity * speckle.sample(rng);
            let db = 10.0 * (intensity + 1e-12).log10();
            let v = 2.0 * (db.clamp(lo, hi) - lo) / (hi - lo) - 1.0;
            out.push(v as f32);
        }
    }
    Ok(out)
}

/// `classes × per_class` training chips, deterministic under `seed`.
pub fn make_toy_dataset(classes: usize, per_class: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    make_toy_split(classes, per_class, 0, image_size, seed)
}

/// Training and test chips from one seeded stream: all training chips
/// first, class by class, then all test chips.
pub fn make_toy_split(
    classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || classes > SHAPES.len() {
        return Err(Error::Config(format!("toy data supports 2..={} classes", SHAPES.len())));
    }
    if image_size < 8 {
        return Err(Error::Config("toy chips need at least 8 pixels".into()));
    }
    let cfg = ToyConfig::new(image_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chips = Vec::with_capacity(classes * (train_per_class + test_per_class));
    for (split, per_class) in [(Split::Train, train_per_class), (Split::Test, test_per_class)] {
        for class in 0..classes {
            for i in 0..per_class {
                let px = render_chip(class, &cfg, &mut rng)?;
                let source = format!("{}_{}_{i:04}", split.as_str(), SHAPES[class]);
                chips.push(ImageChip::new(px, image_size, class, split, source)?);
            }
        }
    }
    Ok(Dataset {
        chips,
        class_names: SHAPES[..classes].iter().map(|s| s.to_string()).collect(),
        image_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_labels() {
        let ds = make_toy_dataset(10, 20, 32, 1).unwrap();
        assert_eq!(ds.chips.len(), 200);
        assert_eq!(ds.num_classes(), 10);
        assert!(ds.chips.iter().all(|c| c.pixels.len() == 32 * 32));
        assert_eq!(ds.chips[20].label, 1);
        ds.validate().unwrap();
    }

    #[test]
    fn deterministic_under_seed() {
        let a = make_toy_split(3, 2, 2, 16, 7).unwrap();
        let b = make_toy_split(3, 2, 2, 16, 7).unwrap();
        assert_eq!(a, b);
        let c = make_toy_split(3, 2, 2, 16, 8).unwrap();
        assert_ne!(a.chips[0].pixels, c.chips[0].pixels);
    }

    #[test]
    fn rejects_degenerate_requests() {
        assert!(make_toy_dataset(1, 4, 32, 0).is_err());
        assert!(make_toy_dataset(11, 4, 32, 0).is_err());
    }

    #[test]
    fn bright_target_on_dark_background() {
        let ds = make_toy_dataset(10, 2, 32, 3).unwrap();
        for c in &ds.chips {
            let mut sorted = c.pixels.clone();
            sorted.sort_by(f32::total_cmp);
            let median = sorted[sorted.len() / 2];
            let top = sorted[sorted.len() - 10];
            assert!(median < -0.4, "median {median}");
            assert!(top > 0.4, "top {top}");
        }
    }
}
