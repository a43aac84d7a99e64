//! PNG loading/saving and the resize step in front of desk-scale backends.

use std::path::Path;

use diffguard_core::image::Image;
use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, ImageBuffer, RgbImage};

use crate::error::CliError;

/// Loads a PNG as an RGB image with values in [0,1], optionally resized to
/// `size` x `size` first.
pub fn load_png(path: &Path, size: Option<u32>) -> Result<Image, CliError> {
    let img = image::open(path)
        .map_err(|e| CliError::Input(format!("cannot read image '{}': {e}", path.display())))?;
    let img = match size {
        Some(s) => img.resize_exact(s, s, FilterType::Triangle),
        None => img,
    };
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.pixels().flat_map(|p| p.0.iter().map(|&v| v as f64 / 255.0)).collect();
    Ok(Image::new(h as usize, w as usize, 3, data))
}

/// Saves an image as PNG: RGB for 3 channels, grayscale otherwise (flat
/// vectors land in a 1-pixel-high strip).
pub fn save_png(image: &Image, path: &Path) -> Result<(), CliError> {
    let bytes = image.quantized_bytes();
    let (w, h) = (image.width as u32, image.height as u32);
    let dynimg = if image.channels == 3 {
        let buf: RgbImage = ImageBuffer::from_raw(w, h, bytes)
            .ok_or_else(|| CliError::Internal("pixel buffer does not match dimensions".into()))?;
        DynamicImage::ImageRgb8(buf)
    } else if image.channels == 1 {
        let buf: GrayImage = ImageBuffer::from_raw(w, h, bytes)
            .ok_or_else(|| CliError::Internal("pixel buffer does not match dimensions".into()))?;
        DynamicImage::ImageLuma8(buf)
    } else {
        return Err(CliError::Input(format!(
            "cannot encode {}-channel image as PNG",
            image.channels
        )));
    };
    dynimg
        .save(path)
        .map_err(|e| CliError::Input(format!("cannot write image '{}': {e}", path.display())))
}
