//! PNG/JPEG reading and writing for images and masks.

use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::imaging::{ImageTensor, ShadowMask};

/// Gray level at or above which a mask pixel counts as shadow.
pub const MASK_THRESHOLD: u8 = 128;

fn codec_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let rgb = image::open(path).map_err(codec_err(path))?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    });
    ImageTensor::new(data)
}

pub fn load_mask(path: &Path) -> Result<ShadowMask> {
    let gray = image::open(path).map_err(codec_err(path))?.to_luma8();
    let (w, h) = gray.dimensions();
    ShadowMask::new(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        gray.get_pixel(x as u32, y as u32)[0] >= MASK_THRESHOLD
    }))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn image_to_rgb8(image: &ImageTensor) -> RgbImage {
    let (h, w) = image.dims();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(image.pixel(y as usize, x as usize).map(to_u8))
    })
}

/// Writes an image; the format follows the file extension.
pub fn save_image(image: &ImageTensor, path: &Path) -> Result<()> {
    image_to_rgb8(image).save(path).map_err(codec_err(path))
}

pub fn save_mask(mask: &ShadowMask, path: &Path) -> Result<()> {
    let (h, w) = mask.dims();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    })
    .save(path)
    .map_err(codec_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = ImageTensor::from_fn(3, 4, |y, x, c| ((y * 4 + x) * 3 + c) as f32 * 5.0 / 255.0);
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mask_is_thresholded_at_128() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        GrayImage::from_fn(4, 1, |x, _| image::Luma([[0u8, 127, 128, 255][x as usize]]))
            .save(&path)
            .unwrap();
        let mask = load_mask(&path).unwrap();
        assert_eq!(
            (0..4).map(|x| mask.get(0, x)).collect::<Vec<_>>(),
            vec![false, false, true, true]
        );
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_image(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.png"));
    }
}
