//! Image and mask persistence.
//!
//! Images live in canonical `[0, 1]` float space as `(channels, height, width)`
//! arrays. Masks are stored as 8-bit grayscale PNG with `value = round(255 * m)`;
//! loading divides by 255, so a round trip is off by at most 1/510.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// An image in canonical `[0, 1]` space, shaped `(channels, height, width)`.
pub type Image = Array3<f64>;

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_mask_png(values: ArrayView2<f64>) -> Result<Vec<u8>> {
    let (h, w) = values.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([quantize(values[[y as usize, x as usize]])])
    });
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn decode_mask_png(bytes: &[u8]) -> Result<Array2<f64>> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0
    }))
}

/// Encodes a 3-channel (or 1-channel, replicated) image as RGB PNG.
pub fn encode_rgb_png(image: ArrayView3<f64>) -> Result<Vec<u8>> {
    let (c, h, w) = image.dim();
    if c != 3 && c != 1 {
        return Err(Error::DimensionMismatch(format!(
            "cannot encode {c}-channel image as RGB"
        )));
    }
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let px = |ch: usize| quantize(image[[if c == 1 { 0 } else { ch }, y, x]]);
        Rgb([px(0), px(1), px(2)])
    });
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn decode_rgb_png(bytes: &[u8]) -> Result<Image> {
    let img = image::load_from_memory(bytes)?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_rgb_png(image: ArrayView3<f64>, path: &Path) -> Result<()> {
    write_bytes(path, &encode_rgb_png(image)?)
}

pub fn load_rgb_png(path: &Path) -> Result<Image> {
    decode_rgb_png(&read_bytes(path)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Rejects ids that cannot be used verbatim as a file stem.
pub fn check_file_stem(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && !id.chars().any(|c| c == '/' || c == '\\' || c.is_control());
    if ok {
        Ok(())
    } else {
        Err(Error::format("image id", format!("{id:?} is not a valid file stem")))
    }
}

/// Image lookup by id; implemented by datasets on disk and in-memory fixtures.
pub trait ImageSource: Sync {
    fn load(&self, image_id: &str) -> Result<Image>;
}

impl ImageSource for std::collections::HashMap<String, Image> {
    fn load(&self, image_id: &str) -> Result<Image> {
        self.get(image_id)
            .cloned()
            .ok_or_else(|| Error::UnknownImage(image_id.to_string()))
    }
}

impl ImageSource for std::collections::BTreeMap<String, Image> {
    fn load(&self, image_id: &str) -> Result<Image> {
        self.get(image_id)
            .cloned()
            .ok_or_else(|| Error::UnknownImage(image_id.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_png_quantization_error_is_bounded() {
        let values = Array2::from_shape_fn((7, 5), |(y, x)| ((y * 5 + x) as f64 / 34.0).powf(1.7));
        let decoded = decode_mask_png(&encode_mask_png(values.view()).unwrap()).unwrap();
        for (a, b) in values.iter().zip(decoded.iter()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12);
        }
        assert_eq!(decoded[[0, 0]], 0.0);
        assert_eq!(decoded[[6, 4]], 1.0);
    }

    #[test]
    fn quantized_masks_are_stable() {
        let values = Array2::from_shape_fn((4, 4), |(y, x)| ((y * 4 + x) * 17) as f64 / 255.0);
        let once = encode_mask_png(values.view()).unwrap();
        let twice = encode_mask_png(decode_mask_png(&once).unwrap().view()).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn rgb_round_trip_is_exact_on_8bit_levels() {
        let img = Array3::from_shape_fn((3, 3, 4), |(c, y, x)| ((c * 50 + y * 20 + x * 7) % 256) as f64 / 255.0);
        let back = decode_rgb_png(&encode_rgb_png(img.view()).unwrap()).unwrap();
        assert_eq!(img, back);
    }
}
