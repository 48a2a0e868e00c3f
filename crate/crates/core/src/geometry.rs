//! Rotated-box geometry and minimum enclosing square crops.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Oriented target annotation in scene pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RotatedBox {
    /// Centre x.
    pub cx: f64,
    /// Centre y.
    pub cy: f64,
    /// Width along the box's own x axis.
    pub w: f64,
    /// Height along the box's own y axis.
    pub h: f64,
    /// Rotation in radians.
    pub theta: f64,
    /// Class id of the annotated target.
    pub class_id: usize,
}

impl RotatedBox {
    /// Validated constructor; `w` and `h` must be positive and everything finite.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64, class_id: usize) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::InvalidParameter {
                name: "box size",
                reason: "width and height must be positive",
            });
        }
        if ![cx, cy, w, h, theta].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("rotated box"));
        }
        Ok(Self {
            cx,
            cy,
            w,
            h,
            theta,
            class_id,
        })
    }

    /// The four corners, counter-clockwise from the box's (−w/2, −h/2) corner.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = libm::sincos(self.theta);
        let (hw, hh) = (0.5 * self.w, 0.5 * self.h);
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)].map(|(x, y)| (self.cx + x * c - y * s, self.cy + x * s + y * c))
    }

    /// Axis-aligned extent `(width, height)` of the rotated box.
    pub fn axis_extent(&self) -> (f64, f64) {
        let (s, c) = libm::sincos(self.theta);
        let (s, c) = (libm::fabs(s), libm::fabs(c));
        (self.w * c + self.h * s, self.w * s + self.h * c)
    }
}

/// Side of the smallest integer square containing the rotated box:
/// `ceil(max(w|cos θ| + h|sin θ|, w|sin θ| + h|cos θ|))`.
pub fn min_square_side(b: &RotatedBox) -> usize {
    let (ex, ey) = b.axis_extent();
    // Absorb trigonometric roundoff at exact quarter turns.
    let side = libm::ceil(ex.max(ey) - 1e-9);
    (side as usize).max(1)
}

/// Square crop window centred on a box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SquareWindow {
    /// Left edge in scene coordinates.
    pub x0: f64,
    /// Top edge in scene coordinates.
    pub y0: f64,
    /// Side length in pixels.
    pub side: usize,
}

impl SquareWindow {
    /// Minimum enclosing square of `b`, centred at the box centre.
    pub fn enclosing(b: &RotatedBox) -> Self {
        let side = min_square_side(b);
        let half = side as f64 / 2.0;
        Self {
            x0: b.cx - half,
            y0: b.cy - half,
            side,
        }
    }

    /// Whether a scene point lies inside (boundary inclusive, with a small
    /// tolerance for roundoff).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        const TOL: f64 = 1e-9;
        let s = self.side as f64;
        x >= self.x0 - TOL && x <= self.x0 + s + TOL && y >= self.y0 - TOL && y <= self.y0 + s + TOL
    }
}

/// A square patch cut from a scene, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SquarePatch {
    /// Side length.
    pub side: usize,
    /// `side * side` pixel values; out-of-scene pixels are zero.
    pub pixels: Vec<f32>,
    /// Window the patch was cut from.
    pub window: SquareWindow,
}

/// Cuts the minimum enclosing square of `b` out of a single-channel,
/// row-major `width × height` scene, zero-padding outside the scene.
///
/// Output pixel `(r, c)` takes the scene pixel under its centre.
pub fn crop_min_square(scene: &[f32], width: usize, height: usize, b: &RotatedBox) -> Result<SquarePatch> {
    if scene.len() != width * height {
        return Err(Error::Dimension {
            expected: width * height,
            actual: scene.len(),
        });
    }
    let (ex, ey) = b.axis_extent();
    let (left, right) = (b.cx - ex / 2.0, b.cx + ex / 2.0);
    let (top, bottom) = (b.cy - ey / 2.0, b.cy + ey / 2.0);
    if right <= 0.0 || bottom <= 0.0 || left >= width as f64 || top >= height as f64 {
        return Err(Error::BoxOutsideScene);
    }
    let window = SquareWindow::enclosing(b);
    let side = window.side;
    let mut pixels = vec![0.0f32; side * side];
    for r in 0..side {
        let y = libm::floor(window.y0 + r as f64 + 0.5);
        if y < 0.0 || y >= height as f64 {
            continue;
        }
        let row = y as usize * width;
        for c in 0..side {
            let x = libm::floor(window.x0 + c as f64 + 0.5);
            if x >= 0.0 && x < width as f64 {
                pixels[r * side + c] = scene[row + x as usize];
            }
        }
    }
    Ok(SquarePatch { side, pixels, window })
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn bx(w: f64, h: f64, theta: f64) -> RotatedBox {
        RotatedBox::new(50.0, 50.0, w, h, theta, 0).unwrap()
    }

    #[test]
    fn side_hand_cases() {
        assert_eq!(min_square_side(&bx(20.0, 10.0, 0.0)), 20);
        assert_eq!(min_square_side(&bx(10.0, 10.0, FRAC_PI_4)), 15);
        assert_eq!(min_square_side(&bx(20.0, 10.0, FRAC_PI_2)), 20);
        assert_eq!(min_square_side(&bx(10.0, 20.0, 0.0)), 20);
    }

    #[test]
    fn box_validation() {
        assert!(RotatedBox::new(0.0, 0.0, 0.0, 1.0, 0.0, 0).is_err());
        assert!(RotatedBox::new(0.0, 0.0, 1.0, -1.0, 0.0, 0).is_err());
        assert!(RotatedBox::new(f64::NAN, 0.0, 1.0, 1.0, 0.0, 0).is_err());
    }

    #[test]
    fn crop_copies_axis_aligned_block() {
        // 8x8 ramp scene, 4x2 box centred at (4, 4).
        let scene: Vec<f32> = (0..64).map(|i| i as f32).collect();
        let b = RotatedBox::new(4.0, 4.0, 4.0, 2.0, 0.0, 1).unwrap();
        let patch = crop_min_square(&scene, 8, 8, &b).unwrap();
        assert_eq!(patch.side, 4);
        // Window spans x, y in [2, 6).
        let expected: Vec<f32> = (2..6).flat_map(|y| (2..6).map(move |x| (y * 8 + x) as f32)).collect();
        assert_eq!(patch.pixels, expected);
    }

    #[test]
    fn crop_zero_pads_outside_scene() {
        let scene = vec![1.0f32; 16];
        let b = RotatedBox::new(0.0, 0.0, 4.0, 4.0, 0.0, 0).unwrap();
        let patch = crop_min_square(&scene, 4, 4, &b).unwrap();
        assert_eq!(patch.side, 4);
        let ones = patch.pixels.iter().filter(|&&p| p == 1.0).count();
        assert_eq!(ones, 4);
    }

    #[test]
    fn crop_rejects_box_outside_scene() {
        let scene = vec![0.0f32; 16];
        let b = RotatedBox::new(40.0, 40.0, 4.0, 4.0, 0.3, 0).unwrap();
        assert_eq!(crop_min_square(&scene, 4, 4, &b), Err(Error::BoxOutsideScene));
        assert!(crop_min_square(&scene, 5, 4, &b).is_err());
    }
}
