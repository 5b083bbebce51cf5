//! 8-bit PNG <-> tensor conversion. Pixel values map to `[-1, 1]` via
//! `v / 127.5 - 1`.

use std::path::Path;

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn to_unit<T: Scalar>(v: u8) -> T {
    T::lit(v as f64 / 127.5 - 1.0)
}

pub fn to_byte<T: Scalar>(v: T) -> u8 {
    ((v.as_f64() + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// `(3, h, w)` tensor from an RGB image.
pub fn rgb_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = to_unit(px.0[c]);
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("shape")
}

pub fn tensor_to_rgb<T: Scalar>(t: &Tensor<T>) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape(format!("expected (3, h, w) image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([
            to_byte(d[y * w + x]),
            to_byte(d[(h + y) * w + x]),
            to_byte(d[(2 * h + y) * w + x]),
        ])
    }))
}

/// `(1, h, w)` binary mask from a grayscale image (nonzero = foreground).
pub fn gray_to_mask<T: Scalar>(img: &GrayImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .pixels()
        .map(|p| if p.0[0] > 127 { T::one() } else { T::zero() })
        .collect();
    Tensor::from_vec(&[1, h, w], data).expect("shape")
}

pub fn mask_to_gray<T: Scalar>(t: &Tensor<T>) -> Result<GrayImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::shape(format!("expected (1, h, w) mask, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if d[y as usize * w + x as usize] > T::lit(0.5) {
            255
        } else {
            0
        }])
    }))
}

pub fn save_rgb<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    tensor_to_rgb(t)?
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::file(path, e.to_string()))
}

pub fn save_mask<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    mask_to_gray(t)?
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::file(path, e.to_string()))
}

/// Loads an image, resizing to `(h, w)` when given and different.
pub fn load_rgb<T: Scalar>(path: &Path, size: Option<(usize, usize)>) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|e| Error::file(path, e.to_string()))?;
    let mut rgb = img.to_rgb8();
    if let Some((h, w)) = size {
        if rgb.height() as usize != h || rgb.width() as usize != w {
            rgb = image::imageops::resize(&rgb, w as u32, h as u32, image::imageops::FilterType::Triangle);
        }
    }
    Ok(rgb_to_tensor(&rgb))
}

pub fn load_mask<T: Scalar>(path: &Path, size: Option<(usize, usize)>) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|e| Error::file(path, e.to_string()))?;
    let mut gray = img.to_luma8();
    if let Some((h, w)) = size {
        if gray.height() as usize != h || gray.width() as usize != w {
            gray = image::imageops::resize(&gray, w as u32, h as u32, image::imageops::FilterType::Nearest);
        }
    }
    Ok(gray_to_mask(&gray))
}
