//! Pixel operations on square, single-channel, row-major `f32` images.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

fn check_square(pixels: &[f32], side: usize) -> Result<()> {
    if side == 0 {
        return Err(Error::ZeroDimension);
    }
    if pixels.len() != side * side {
        return Err(Error::Dimension {
            expected: side * side,
            actual: pixels.len(),
        });
    }
    Ok(())
}

/// Maps an 8-bit intensity into [−1, 1].
pub fn normalize_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Inverse of [`normalize_u8`], clamping and rounding to the nearest level.
pub fn denormalize_u8(v: f32) -> u8 {
    libm::roundf((v.clamp(-1.0, 1.0) + 1.0) * 127.5) as u8
}

/// Rotates counter-clockwise by `quarter_turns × 90°`.
pub fn rotate90(pixels: &[f32], side: usize, quarter_turns: u8) -> Result<Vec<f32>> {
    check_square(pixels, side)?;
    let mut out = pixels.to_vec();
    for _ in 0..quarter_turns % 4 {
        let src = out.clone();
        for r in 0..side {
            for c in 0..side {
                // (r, c) <- (c, side - 1 - r)
                out[r * side + c] = src[c * side + (side - 1 - r)];
            }
        }
    }
    Ok(out)
}

/// Mirrors left-right.
pub fn flip_horizontal(pixels: &[f32], side: usize) -> Result<Vec<f32>> {
    check_square(pixels, side)?;
    let mut out = pixels.to_vec();
    for row in out.chunks_mut(side) {
        row.reverse();
    }
    Ok(out)
}

fn bilinear(pixels: &[f32], side: usize, x: f64, y: f64) -> f32 {
    let max = (side - 1) as f64;
    let (x, y) = (x.clamp(0.0, max), y.clamp(0.0, max));
    let (x0, y0) = (libm::floor(x) as usize, libm::floor(y) as usize);
    let (x1, y1) = ((x0 + 1).min(side - 1), (y0 + 1).min(side - 1));
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    if fx == 0.0 && fy == 0.0 {
        return pixels[y0 * side + x0];
    }
    let top = pixels[y0 * side + x0] * (1.0 - fx) + pixels[y0 * side + x1] * fx;
    let bottom = pixels[y1 * side + x0] * (1.0 - fx) + pixels[y1 * side + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Crop window in source pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropRect {
    /// Left edge.
    pub x: f64,
    /// Top edge.
    pub y: f64,
    /// Width.
    pub w: f64,
    /// Height.
    pub h: f64,
}

impl CropRect {
    /// The whole image.
    pub fn full(side: usize) -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            w: side as f64,
            h: side as f64,
        }
    }
}

/// Bilinearly resamples `rect` of the source onto an `out_side` square,
/// sampling at pixel centres. A full-image crop at the same size is an
/// exact copy.
pub fn resized_crop(pixels: &[f32], side: usize, rect: CropRect, out_side: usize) -> Result<Vec<f32>> {
    check_square(pixels, side)?;
    if out_side == 0 {
        return Err(Error::ZeroDimension);
    }
    let (sx, sy) = (rect.w / out_side as f64, rect.h / out_side as f64);
    let mut out = vec![0.0f32; out_side * out_side];
    for r in 0..out_side {
        let y = rect.y + (r as f64 + 0.5) * sy - 0.5;
        for c in 0..out_side {
            let x = rect.x + (c as f64 + 0.5) * sx - 0.5;
            out[r * out_side + c] = bilinear(pixels, side, x, y);
        }
    }
    Ok(out)
}

/// Resizes a whole square image.
pub fn resize(pixels: &[f32], side: usize, out_side: usize) -> Result<Vec<f32>> {
    resized_crop(pixels, side, CropRect::full(side), out_side)
}

/// `clamp(contrast · (v − mean) + mean + brightness, −1, 1)`.
pub fn jitter_intensity(pixels: &[f32], brightness: f32, contrast: f32) -> Vec<f32> {
    if brightness == 0.0 && contrast == 1.0 {
        return pixels.to_vec();
    }
    let mean = pixels.iter().sum::<f32>() / pixels.len().max(1) as f32;
    pixels
        .iter()
        .map(|&v| (contrast * (v - mean) + mean + brightness).clamp(-1.0, 1.0))
        .collect()
}
