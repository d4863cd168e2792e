//! 8-bit PNG loading/saving and bicubic resizing.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, Rgb};

use crate::colorspace::{extract_luminance, GrayImage, RgbImage};
use crate::error::{Error, Result};

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(image_err(path))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(RgbImage::from_fn(w as usize, h as usize, |x, y| {
        img.get_pixel(x as u32, y as u32)
            .0
            .map(|c| c as f32 / 255.0)
    }))
}

/// Loads any image and keeps only its Lab lightness. A gray PNG level `v`
/// is read as the sRGB color `(v, v, v)`.
pub fn load_gray(path: &Path) -> Result<GrayImage> {
    Ok(extract_luminance(&load_rgb(path)?))
}

pub fn to_rgb8(img: &RgbImage) -> image::RgbImage {
    let (w, h) = img.dims();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Rgb(img
            .get(x as usize, y as usize)
            .map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    to_rgb8(img).save(path).map_err(image_err(path))
}

/// Saves the lightness as an 8-bit gray PNG of neutral sRGB levels.
pub fn save_gray(path: &Path, img: &GrayImage) -> Result<()> {
    save_rgb(path, &img.to_rgb())
}

/// Bicubic (Catmull-Rom) resize; overshoot is clamped.
pub fn resize_rgb(img: &RgbImage, width: usize, height: usize) -> RgbImage {
    if img.dims() == (width, height) {
        return img.clone();
    }
    let (w, h) = img.dims();
    let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Rgb(img.get(x as usize, y as usize)));
    let out = imageops::resize(&buf, width as u32, height as u32, FilterType::CatmullRom);
    RgbImage::from_fn(width, height, |x, y| out.get_pixel(x as u32, y as u32).0)
}

/// Bicubic resize of the lightness plane.
pub fn resize_gray(img: &GrayImage, width: usize, height: usize) -> GrayImage {
    if img.dims() == (width, height) {
        return img.clone();
    }
    let (w, h) = img.dims();
    let values = img.values();
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([values[y as usize * w + x as usize]])
    });
    let out = imageops::resize(&buf, width as u32, height as u32, FilterType::CatmullRom);
    GrayImage::from_fn(width, height, |x, y| out.get_pixel(x as u32, y as u32).0[0])
}
