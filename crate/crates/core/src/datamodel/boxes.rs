use ndarray::ArrayView2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates, half-open: a box covering only
/// pixel `(x, y)` is `(x, y, x + 1, y + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
}

impl BoundingBox {
    pub fn new(x_min: f32, y_min: f32, x_max: f32, y_max: f32) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite coordinates {b:?}")));
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::InvalidBox(format!(
                "degenerate box [{x_min}, {y_min}, {x_max}, {y_max}]"
            )));
        }
        Ok(b)
    }

    pub fn from_array(a: [f32; 4]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(&self) -> [f32; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    /// Checks the box lies within a `width x height` frame and covers at
    /// least one pixel.
    pub fn check_within(&self, width: usize, height: usize) -> Result<()> {
        if self.x_min < 0.0
            || self.y_min < 0.0
            || self.x_max > width as f32
            || self.y_max > height as f32
        {
            return Err(Error::InvalidBox(format!(
                "box {:?} outside {width}x{height} frame",
                self.to_array()
            )));
        }
        if self.area() < 1.0 {
            return Err(Error::InvalidBox(format!(
                "box {:?} covers less than one pixel",
                self.to_array()
            )));
        }
        Ok(())
    }

    /// Maps the box from a `from_w x from_h` frame to a `to_w x to_h` frame.
    pub fn rescale(&self, from_w: usize, from_h: usize, to_w: usize, to_h: usize) -> Self {
        let sx = to_w as f32 / from_w as f32;
        let sy = to_h as f32 / from_h as f32;
        Self {
            x_min: self.x_min * sx,
            y_min: self.y_min * sy,
            x_max: self.x_max * sx,
            y_max: self.y_max * sy,
        }
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }

    /// Integer pixel extent `(x0, y0, x1, y1)` covering the box, clamped to
    /// the frame and at least one pixel wide.
    pub fn pixel_extent(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let x0 = (self.x_min.floor().max(0.0) as usize).min(width.saturating_sub(1));
        let y0 = (self.y_min.floor().max(0.0) as usize).min(height.saturating_sub(1));
        let x1 = (self.x_max.ceil() as usize).clamp(x0 + 1, width);
        let y1 = (self.y_max.ceil() as usize).clamp(y0 + 1, height);
        (x0, y0, x1, y1)
    }
}

/// Tight half-open box `(x0, y0, x1, y1)` of the foreground, if any.
pub fn tight_box(mask: ArrayView2<bool>) -> Option<(usize, usize, usize, usize)> {
    let mut ext: Option<(usize, usize, usize, usize)> = None;
    for ((y, x), &v) in mask.indexed_iter() {
        if !v {
            continue;
        }
        ext = Some(match ext {
            None => (x, y, x + 1, y + 1),
            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
        });
    }
    ext
}

/// Tight box of the foreground with each side independently pushed outwards
/// by up to `jitter` pixels (uniform in `[-jitter, jitter]`, inward moves
/// clamped to zero) and clamped to the frame.
pub fn box_from_mask<R: Rng + ?Sized>(
    mask: ArrayView2<bool>,
    jitter: u32,
    rng: &mut R,
) -> Result<BoundingBox> {
    let (h, w) = mask.dim();
    let (x0, y0, x1, y1) =
        tight_box(mask).ok_or_else(|| Error::InvalidInput("mask has no foreground".into()))?;
    let j = jitter as i64;
    let mut draw = || if j == 0 { 0 } else { rng.random_range(-j..=j) };
    let (dx0, dy0, dx1, dy1) = (draw(), draw(), draw(), draw());
    let nx0 = (x0 as i64 + dx0).clamp(0, x0 as i64);
    let ny0 = (y0 as i64 + dy0).clamp(0, y0 as i64);
    let nx1 = (x1 as i64 + dx1).clamp(x1 as i64, w as i64);
    let ny1 = (y1 as i64 + dy1).clamp(y1 as i64, h as i64);
    BoundingBox::new(nx0 as f32, ny0 as f32, nx1 as f32, ny1 as f32)
}
