//! Image chips, datasets and basic augmentation.

mod io;
pub mod srsdd;
pub mod toy;

use crgan_core::raster;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use io::{load_chip_dataset, read_gray, save_dataset, write_gray, CLASS_LIST, SPLIT_MANIFEST};

use crate::{Error, Result};

/// Dataset partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "train" => Some(Self::Train),
            "test" => Some(Self::Test),
            _ => None,
        }
    }
}

/// Square single-channel image in [−1, 1] with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageChip {
    pub pixels: Vec<f32>,
    pub side: usize,
    pub label: usize,
    pub split: Split,
    /// Stable identifier, usually the file stem.
    pub source: String,
}

impl ImageChip {
    pub fn new(pixels: Vec<f32>, side: usize, label: usize, split: Split, source: impl Into<String>) -> Result<Self> {
        if side == 0 || pixels.len() != side * side {
            return Err(Error::Validation(format!(
                "chip with {} pixels is not {side}x{side}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(-1.0..=1.0).contains(p)) {
            return Err(Error::Validation("chip pixels must lie in [-1, 1]".into()));
        }
        Ok(Self {
            pixels,
            side,
            label,
            split,
            source: source.into(),
        })
    }
}

/// Labelled chips sharing one size.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub chips: Vec<ImageChip>,
    pub class_names: Vec<String>,
    pub image_size: usize,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, split: Split) -> Vec<&ImageChip> {
        self.chips.iter().filter(|c| c.split == split).collect()
    }

    /// Pixel buffers of one split, in dataset order.
    pub fn images(&self, split: Split) -> Vec<Vec<f32>> {
        self.split(split).into_iter().map(|c| c.pixels.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.chips {
            if c.side != self.image_size {
                return Err(Error::Validation(format!("chip {} has side {}", c.source, c.side)));
            }
            if c.label >= self.num_classes() {
                return Err(Error::Validation(format!("chip {} has label {}", c.source, c.label)));
            }
        }
        Ok(())
    }
}

/// Rotation by a multiple of 90° and an optional horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BasicAugment {
    pub quarter_turns: u8,
    pub flip: bool,
}

impl BasicAugment {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            quarter_turns: rng.random_range(0..4),
            flip: rng.random_bool(0.5),
        }
    }

    pub fn apply(&self, pixels: &[f32], side: usize) -> Result<Vec<f32>> {
        let out = raster::rotate90(pixels, side, self.quarter_turns)?;
        Ok(if self.flip {
            raster::flip_horizontal(&out, side)?
        } else {
            out
        })
    }
}

/// Random quarter-turn rotation and horizontal flip; the label is kept.
pub fn augment_basic<R: Rng + ?Sized>(chip: &ImageChip, rng: &mut R) -> Result<ImageChip> {
    let aug = BasicAugment::draw(rng);
    Ok(ImageChip {
        pixels: aug.apply(&chip.pixels, chip.side)?,
        ..chip.clone()
    })
}
