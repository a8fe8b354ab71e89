use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

/// Bilinear resize of an `H x W x C` array with half-pixel centres
/// (no corner alignment, no antialiasing).
pub fn resize_bilinear(src: ArrayView3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (h, w, c) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.to_owned();
    }
    let ys = axis_weights(h, out_h);
    let xs = axis_weights(w, out_w);
    let mut out = Array3::<f32>::zeros((out_h, out_w, c));
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let top = lerp(src[[y0, x0, ch]], src[[y0, x1, ch]], fx);
                let bottom = lerp(src[[y1, x0, ch]], src[[y1, x1, ch]], fx);
                out[[oy, ox, ch]] = lerp(top, bottom, fy);
            }
        }
    }
    out
}

/// Bilinear resize of a single-channel field.
pub fn resize_bilinear_2d(src: ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    let view = src
        .into_shape_with_order((h, w, 1))
        .map(|v| v.to_owned())
        .unwrap_or_else(|_| src.to_owned().into_shape_with_order((h, w, 1)).expect("contiguous"));
    resize_bilinear(view.view(), out_h, out_w)
        .into_shape_with_order((out_h, out_w))
        .expect("single channel")
}

/// Nearest-neighbour resize, used for label and mask arrays.
pub fn resize_nearest<T: Copy>(src: ArrayView2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = src.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let iy = ((y as f64 * sy).floor() as usize).min(h - 1);
        let ix = ((x as f64 * sx).floor() as usize).min(w - 1);
        src[[iy, ix]]
    })
}

// Written as a + t (b - a) so equal endpoints reproduce the value exactly.
#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

fn axis_weights(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let f = if i1 == i0 { 0.0 } else { (src - i0 as f64) as f32 };
            (i0, i1, f)
        })
        .collect()
}

/// Per-slice min-max normalisation to `[0, 1]`; a constant slice maps to zeros.
pub fn normalize_minmax(src: ArrayView3<f32>) -> Result<Array3<f32>> {
    if src.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("slice contains non-finite pixel values".into()));
    }
    let (lo, hi) = src
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if src.is_empty() || range <= 0.0 {
        return Ok(Array3::zeros(src.raw_dim()));
    }
    Ok(src.mapv(|v| (v - lo) / range))
}

/// Normalises, replicates grayscale to three channels and resizes to
/// `img_size x img_size`. Accepts `H x W x 1` or `H x W x 3`.
pub fn preprocess_slice(raw: ArrayView3<f32>, img_size: usize) -> Result<Array3<f32>> {
    let (h, w, c) = raw.dim();
    if h == 0 || w == 0 {
        return Err(Error::Shape("empty slice".into()));
    }
    let norm = normalize_minmax(raw)?;
    let rgb = match c {
        3 => norm,
        1 => Array3::from_shape_fn((h, w, 3), |(y, x, _)| norm[[y, x, 0]]),
        other => {
            return Err(Error::Shape(format!(
                "slice must have 1 or 3 channels, got {other}"
            )))
        }
    };
    Ok(resize_bilinear(rgb.view(), img_size, img_size))
}

/// Grayscale convenience wrapper around [`preprocess_slice`].
pub fn preprocess_gray(raw: ArrayView2<f32>, img_size: usize) -> Result<Array3<f32>> {
    let (h, w) = raw.dim();
    let v = raw.to_owned().into_shape_with_order((h, w, 1)).expect("owned is contiguous");
    preprocess_slice(v.view(), img_size)
}
