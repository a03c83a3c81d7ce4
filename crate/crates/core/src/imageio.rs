//! Raster file I/O and preprocessing: black-margin crop, square center crop,
//! bilinear resize.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageError, Rgb32FImage, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{Raster, CHANNELS};

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("cannot read image {path}: {reason}")]
    UnreadableImage { path: String, reason: String },
    #[error("unsupported image format for {path}: {reason}")]
    UnsupportedFormat { path: String, reason: String },
    #[error("cannot write image {path}: {reason}")]
    Write { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    /// Output side length in pixels.
    pub size: usize,
    /// Border rows/columns whose every channel is below this are cropped.
    pub crop_threshold: f32,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            size: 300,
            crop_threshold: 0.04,
        }
    }
}

fn is_dark(img: &Rgb32FImage, x: u32, y: u32, threshold: f32) -> bool {
    img.get_pixel(x, y).0.iter().all(|&v| v < threshold)
}

/// Bounding box `(x, y, w, h)` left after peeling near-black border rows and
/// columns. The whole image is kept if it is entirely dark.
pub fn margin_box(img: &Rgb32FImage, threshold: f32) -> (u32, u32, u32, u32) {
    let (w, h) = img.dimensions();
    let row_dark = |y: u32, x0: u32, x1: u32| (x0..x1).all(|x| is_dark(img, x, y, threshold));
    let col_dark = |x: u32, y0: u32, y1: u32| (y0..y1).all(|y| is_dark(img, x, y, threshold));
    let (mut top, mut bottom, mut left, mut right) = (0, h, 0, w);
    while top < bottom && row_dark(top, left, right) {
        top += 1;
    }
    if top == bottom {
        return (0, 0, w, h);
    }
    while bottom > top && row_dark(bottom - 1, left, right) {
        bottom -= 1;
    }
    while left < right && col_dark(left, top, bottom) {
        left += 1;
    }
    while right > left && col_dark(right - 1, top, bottom) {
        right -= 1;
    }
    (left, top, right - left, bottom - top)
}

/// Crop the dark margin, center-crop to a square and resize to `opts.size`.
pub fn preprocess(img: &Rgb32FImage, opts: &Preprocess) -> Raster {
    let (x, y, w, h) = margin_box(img, opts.crop_threshold);
    let side = w.min(h);
    let (x, y) = (x + (w - side) / 2, y + (h - side) / 2);
    let square = imageops::crop_imm(img, x, y, side, side).to_image();
    let target = opts.size as u32;
    let resized = if side == target {
        square
    } else {
        imageops::resize(&square, target, target, FilterType::Triangle)
    };
    to_raster(&resized)
}

pub fn to_raster(img: &Rgb32FImage) -> Raster {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Raster::new(w as usize, h as usize, data).expect("decoded image is a valid raster")
}

pub fn load_raster(path: &Path, opts: &Preprocess) -> Result<Raster, ImageIoError> {
    let display = path.display().to_string();
    let decoded = image::ImageReader::open(path)
        .map_err(|e| ImageIoError::UnreadableImage {
            path: display.clone(),
            reason: e.to_string(),
        })?
        .with_guessed_format()
        .map_err(|e| ImageIoError::UnreadableImage {
            path: display.clone(),
            reason: e.to_string(),
        })?
        .decode()
        .map_err(|e| match e {
            ImageError::Unsupported(u) => ImageIoError::UnsupportedFormat {
                path: display.clone(),
                reason: u.to_string(),
            },
            other => ImageIoError::UnreadableImage {
                path: display.clone(),
                reason: other.to_string(),
            },
        })?;
    Ok(preprocess(&decoded.to_rgb32f(), opts))
}

/// Writes an 8-bit RGB PNG.
pub fn save_png(raster: &Raster, path: &Path) -> Result<(), ImageIoError> {
    let bytes: Vec<u8> = raster
        .data()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    debug_assert_eq!(bytes.len(), raster.width() * raster.height() * CHANNELS);
    let img = RgbImage::from_raw(raster.width() as u32, raster.height() as u32, bytes)
        .expect("buffer matches dimensions");
    img.save(path).map_err(|e| ImageIoError::Write {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}
