//! PNG ingestion/emission and conversions between 8-bit rasters and the
//! float tensors the networks consume.

use super::{DataError, Result};
use crate::tensor::TensorImage;
use image::{DynamicImage, GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use std::path::Path;

/// An 8-bit RGB raster in channel-major (3, H, W) order.
pub type RgbRaster = Array3<u8>;

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| DataError::Image { path: path.to_path_buf(), source })
}

pub fn load_image_rgb(path: &Path) -> Result<RgbRaster> {
    let img = open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = RgbRaster::zeros((3, h, w));
    for (x, y, pixel) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[[ch, y as usize, x as usize]] = pixel.0[ch];
        }
    }
    Ok(out)
}

/// Loads a single-channel 8-bit annotation raster. Multi-channel label
/// files are rejected rather than silently converted: a luma conversion
/// would arithmetically blend class ids.
pub fn load_label_png(path: &Path) -> Result<Array2<u8>> {
    match open(path)? {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            Ok(Array2::from_shape_fn((h, w), |(y, x)| {
                img.get_pixel(x as u32, y as u32).0[0]
            }))
        }
        other => Err(DataError::Layout(format!(
            "{}: label file must be single-channel 8-bit, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|source| DataError::Io { path: parent.to_path_buf(), source })?;
    }
    Ok(())
}

pub fn save_rgb_png(path: &Path, raster: &RgbRaster) -> Result<()> {
    ensure_parent(path)?;
    let (_, h, w) = raster.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for (x, y, pixel) in img.enumerate_pixels_mut() {
        for ch in 0..3 {
            pixel.0[ch] = raster[[ch, y as usize, x as usize]];
        }
    }
    img.save(path).map_err(|source| DataError::Image { path: path.to_path_buf(), source })
}

pub fn save_label_png(path: &Path, labels: &Array2<u8>) -> Result<()> {
    ensure_parent(path)?;
    let (h, w) = labels.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for (x, y, pixel) in img.enumerate_pixels_mut() {
        pixel.0[0] = labels[[y as usize, x as usize]];
    }
    img.save(path).map_err(|source| DataError::Image { path: path.to_path_buf(), source })
}

/// Raster → (1, 3, H, W) float tensor on the raw 0..=255 pixel scale.
/// Normalization happens inside the augmentation pipeline.
pub fn image_to_tensor(raster: &RgbRaster) -> TensorImage<f32> {
    let (c, h, w) = raster.dim();
    TensorImage::from_shape_fn((1, c, h, w), |(_, ch, y, x)| f32::from(raster[[ch, y, x]]))
}

/// Undoes channel normalization and quantizes back to 8-bit, for writing
/// relit previews. The inverse of the augment pipeline's final step.
pub fn denormalize_to_raster(x: &TensorImage<f32>, mean: [f32; 3], std: [f32; 3]) -> RgbRaster {
    let (_, c, h, w) = x.dim();
    assert_eq!(c, 3, "expected an RGB tensor");
    RgbRaster::from_shape_fn((3, h, w), |(ch, y, x_)| {
        let v = (x[[0, ch, y, x_]] * std[ch] + mean[ch]) * 255.0;
        v.round().clamp(0.0, 255.0) as u8
    })
}

/// Mean photometric luminance of a raster in [0, 1].
pub fn raster_mean_luminance(raster: &RgbRaster) -> f64 {
    let (_, h, w) = raster.dim();
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            let r = f64::from(raster[[0, y, x]]);
            let g = f64::from(raster[[1, y, x]]);
            let b = f64::from(raster[[2, y, x]]);
            sum += 0.2126 * r + 0.7152 * g + 0.0722 * b;
        }
    }
    sum / (255.0 * (h * w) as f64)
}
