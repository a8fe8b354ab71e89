use std::io::Cursor;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::{ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};
use image::codecs::png::PngEncoder;
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::ApiError;

/// Largest accepted side length for uploaded images.
pub const MAX_SIDE: u32 = 4096;

fn encode(bytes: &[u8], w: usize, h: usize, color: ExtendedColorType) -> Result<Vec<u8>, ApiError> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(bytes, w as u32, h as u32, color)
        .map_err(|e| ApiError::Internal(format!("png encode: {e}")))?;
    Ok(out)
}

/// Single-channel PNG with 255 for foreground, 0 elsewhere.
pub fn encode_mask(mask: ArrayView2<bool>) -> Result<Vec<u8>, ApiError> {
    let (h, w) = mask.dim();
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    encode(&bytes, w, h, ExtendedColorType::L8)
}

/// `H x W x C` u8 pixels (`C` 1 or 3) as a PNG.
pub fn encode_image(img: ArrayView3<u8>) -> Result<Vec<u8>, ApiError> {
    let (h, w, c) = img.dim();
    let color = match c {
        1 => ExtendedColorType::L8,
        3 => ExtendedColorType::Rgb8,
        _ => return Err(ApiError::Internal(format!("cannot encode {c} channels"))),
    };
    let bytes: Vec<u8> = img.iter().copied().collect();
    encode(&bytes, w, h, color)
}

pub fn b64(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

/// Decodes a base64 PNG into `H x W x C` floats, grey images keeping one
/// channel. The size limit is checked from the header before decoding.
pub fn decode_image_b64(data: &str) -> Result<Array3<f32>, ApiError> {
    let bytes = STANDARD
        .decode(data.trim())
        .map_err(|e| ApiError::BadRequest(format!("image_b64 is not valid base64: {e}")))?;
    let bad = |e: image::ImageError| ApiError::BadRequest(format!("image_b64 is not a PNG: {e}"));
    let (w, h) = ImageReader::with_format(Cursor::new(&bytes), ImageFormat::Png)
        .into_dimensions()
        .map_err(bad)?;
    if w > MAX_SIDE || h > MAX_SIDE {
        return Err(ApiError::PayloadTooLarge(format!(
            "image is {w}x{h}, limit is {MAX_SIDE}x{MAX_SIDE}"
        )));
    }
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(bad)?;
    let (w, h) = (w as usize, h as usize);
    let shape_err = |e: ndarray::ShapeError| ApiError::Internal(e.to_string());
    if img.color().has_color() {
        let rgb = img.to_rgb8().into_raw();
        Array3::from_shape_vec((h, w, 3), rgb).map(|a| a.mapv(f32::from)).map_err(shape_err)
    } else {
        let grey = img.to_luma8().into_raw();
        Array3::from_shape_vec((h, w, 1), grey).map(|a| a.mapv(f32::from)).map_err(shape_err)
    }
}

/// Decodes a single-channel mask PNG back to booleans (test helper for
/// clients).
pub fn decode_mask_b64(data: &str) -> Result<Array2<bool>, ApiError> {
    let bytes = STANDARD
        .decode(data)
        .map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| ApiError::BadRequest(e.to_string()))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), img.into_raw().into_iter().map(|v| v > 127).collect())
        .map_err(|e| ApiError::Internal(e.to_string()))
}
