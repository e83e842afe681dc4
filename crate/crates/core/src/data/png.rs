//! PNG encoding helpers.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, RgbImage};

use crate::error::{Error, Result};
use crate::image::{Image, MaskPlane};

fn codec_error(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Quantizes `[0, 1]` to 8 bits by rounding.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 3-channel image as 8-bit RGB.
pub fn write_rgb8(img: &Image, path: &Path) -> Result<()> {
    let (c, h, w) = img.shape();
    if c != 3 {
        return Err(Error::shape("3 channels", format!("{c} channels")));
    }
    let n = h * w;
    let buf = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([
            to_u8(img.data()[i]),
            to_u8(img.data()[n + i]),
            to_u8(img.data()[2 * n + i]),
        ])
    });
    buf.save(path).map_err(|e| codec_error(path, e))
}

/// Writes a binary plane as 8-bit grayscale, 255 where set.
pub fn write_mask_png(mask: &MaskPlane, path: &Path) -> Result<()> {
    let (h, w) = (mask.height(), mask.width());
    let buf = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([mask.get(y as usize, x as usize) * 255])
    });
    buf.save(path).map_err(|e| codec_error(path, e))
}

pub fn write_gray16(values: &[u16], height: usize, width: usize, path: &Path) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width as u32, height as u32, values.to_vec())
            .ok_or_else(|| Error::shape(format!("{} values", height * width), values.len()))?;
    buf.save(path).map_err(|e| codec_error(path, e))
}

/// Reads a grayscale PNG as 16-bit samples.
pub fn read_gray16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let img = image::open(path)
        .map_err(|e| codec_error(path, e))?
        .into_luma16();
    Ok((img.height() as usize, img.width() as usize, img.into_raw()))
}

pub fn write_rgb_bytes(rgb: Vec<u8>, height: usize, width: usize, path: &Path) -> Result<()> {
    let buf = RgbImage::from_raw(width as u32, height as u32, rgb)
        .ok_or_else(|| Error::shape(format!("{} bytes", 3 * height * width), "fewer"))?;
    buf.save(path).map_err(|e| codec_error(path, e))
}
