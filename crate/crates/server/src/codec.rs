//! PNG conversion between request/response payloads and model tensors.

use std::io::Cursor;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, ImageFormat, ImageReader, Luma};
use serde::Serialize;

use clickadapt::eval::rgb_to_tensor;
use clickadapt::{Prediction, Tensor};

use crate::error::ApiError;

/// Decodes a PNG and resizes it to the model's square input.
/// Returns the image tensor and the original `(height, width)`.
pub fn decode_image(bytes: &[u8], size: usize, max_pixels: u64) -> Result<(Tensor, usize, usize), ApiError> {
    let reader = ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png);
    let (w, h) = reader
        .into_dimensions()
        .map_err(|e| ApiError::BadImage(e.to_string()))?;
    if u64::from(w) * u64::from(h) > max_pixels {
        return Err(ApiError::TooLarge(format!("{w}x{h} exceeds {max_pixels} pixels")));
    }
    let rgb = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| ApiError::BadImage(e.to_string()))?
        .to_rgb8();
    let side = size as u32;
    let rgb = if rgb.dimensions() == (side, side) {
        rgb
    } else {
        imageops::resize(&rgb, side, side, FilterType::Triangle)
    };
    Ok((rgb_to_tensor(&rgb), h as usize, w as usize))
}

/// Model-resolution coordinate of an image pixel.
pub fn to_model(coord: usize, extent: usize, size: usize) -> usize {
    coord * size / extent
}

fn encode<P: image::PixelWithColorType>(img: &ImageBuffer<P, Vec<P::Subpixel>>) -> Vec<u8>
where
    [P::Subpixel]: image::EncodableLayout,
{
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

/// Nearest-neighbour upsampling of a model-resolution map to the image size.
fn upsample(map: &Tensor, height: usize, width: usize, f: impl Fn(f64) -> u16) -> Vec<u16> {
    let (mh, mw) = (map.shape()[0], map.shape()[1]);
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            out.push(f(map.at2(to_model(y, height, mh), to_model(x, width, mw))));
        }
    }
    out
}

/// Binary mask as an 8-bit 0/255 PNG.
pub fn mask_png(pred: &Prediction, height: usize, width: usize) -> Vec<u8> {
    let data: Vec<u8> = upsample(&pred.binary, height, width, |v| if v >= 0.5 { 255 } else { 0 })
        .into_iter()
        .map(|v| v as u8)
        .collect();
    encode(&ImageBuffer::<Luma<u8>, _>::from_raw(width as u32, height as u32, data).expect("matching length"))
}

/// Probabilities as a 16-bit PNG (`round(p · 65535)`).
pub fn probability_png(pred: &Prediction, height: usize, width: usize) -> Vec<u8> {
    let data = upsample(&pred.probabilities, height, width, |p| (p * 65535.0).round() as u16);
    encode(&ImageBuffer::<Luma<u16>, _>::from_raw(width as u32, height as u32, data).expect("matching length"))
}

#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
pub struct ProbabilityStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub foreground_fraction: f64,
}

impl ProbabilityStats {
    pub fn of(pred: &Prediction) -> Self {
        let p = pred.probabilities.data();
        let n = p.len().max(1) as f64;
        Self {
            min: p.iter().copied().fold(f64::INFINITY, f64::min),
            max: p.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: p.iter().sum::<f64>() / n,
            foreground_fraction: pred.binary.data().iter().sum::<f64>() / n,
        }
    }
}
