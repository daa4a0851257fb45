//! Image decoding and conversion to network input.

use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Smallest side accepted as a fundus photograph.
pub const MIN_IMAGE_SIDE: u32 = 64;

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory(bytes)?;
    Ok(img.to_rgb8())
}

pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

pub fn check_min_size(img: &RgbImage) -> Result<()> {
    if img.width() < MIN_IMAGE_SIDE || img.height() < MIN_IMAGE_SIDE {
        return Err(Error::Validation(format!(
            "image is {}x{}, below the {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE} minimum",
            img.width(),
            img.height()
        )));
    }
    Ok(())
}

/// `[1, H, W, 3]` with channels mapped from 0..255 to [-1, 1].
pub fn rgb_to_tensor<T: Real>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = img.dimensions();
    let data = img
        .as_raw()
        .iter()
        .map(|&v| T::from_f64_lossy(f64::from(v) / 127.5 - 1.0))
        .collect();
    Tensor::new(vec![1, h as usize, w as usize, 3], data).expect("rgb buffer matches its dimensions")
}

/// Evaluation preprocessing: plain resize to `size × size`.
pub fn resize_square(img: &RgbImage, size: u32) -> RgbImage {
    if img.dimensions() == (size, size) {
        return img.clone();
    }
    image::imageops::resize(img, size, size, FilterType::Triangle)
}

pub fn prepare<T: Real>(img: &RgbImage, size: usize) -> Tensor<T> {
    rgb_to_tensor(&resize_square(img, size as u32))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_range_and_layout() {
        let mut img = RgbImage::new(2, 1);
        img.put_pixel(1, 0, image::Rgb([255, 0, 128]));
        let t: Tensor<f64> = rgb_to_tensor(&img);
        assert_eq!(t.shape(), &[1, 1, 2, 3]);
        assert_eq!(&t.data()[..3], &[-1.0, -1.0, -1.0]);
        assert_eq!(t.data()[3], 1.0);
        assert_eq!(t.data()[4], -1.0);
    }

    #[test]
    fn rejects_tiny_and_garbage() {
        assert!(check_min_size(&RgbImage::new(1, 1)).is_err());
        assert!(decode_rgb(b"not an image").is_err());
    }
}
