//! Pixel-level helpers shared by the other modules: codecs, crops, padding,
//! Gaussian blur, bicubic resize and luma conversion.

use std::io::Cursor;
use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::codecs::png::PngEncoder;
use image::{ImageEncoder, RgbImage};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Integer rectangle `(x, y, w, h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Rect { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        u64::from(self.w) * u64::from(self.h)
    }

    pub fn contains(&self, px: u32, py: u32) -> bool {
        px >= self.x && py >= self.y && px - self.x < self.w && py - self.y < self.h
    }
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .expect("png encoding into memory cannot fail for a valid RgbImage");
    out
}

pub fn encode_jpeg(img: &RgbImage, quality: u8) -> Vec<u8> {
    let mut out = Vec::new();
    JpegEncoder::new_with_quality(&mut out, quality.clamp(1, 100))
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .expect("jpeg encoding into memory cannot fail for a valid RgbImage");
    out
}

pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::io("<memory>", e))?
        .decode()?;
    Ok(img.to_rgb8())
}

/// JPEG encode at `quality` and decode back.
pub fn jpeg_roundtrip(img: &RgbImage, quality: u8) -> Result<RgbImage> {
    decode_image(&encode_jpeg(img, quality))
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn crop(img: &RgbImage, r: Rect) -> RgbImage {
    image::imageops::crop_imm(img, r.x, r.y, r.w, r.h).to_image()
}

fn reflect_index(i: i64, n: i64) -> u32 {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as u32
}

/// Crop `r` out of `img`, reflect-padding wherever the rectangle leaves the image.
pub fn crop_reflect(img: &RgbImage, r: Rect) -> RgbImage {
    if r.x + r.w <= img.width() && r.y + r.h <= img.height() {
        return crop(img, r);
    }
    let (w, h) = (i64::from(img.width()), i64::from(img.height()));
    RgbImage::from_fn(r.w, r.h, |x, y| {
        let sx = reflect_index(i64::from(r.x + x), w);
        let sy = reflect_index(i64::from(r.y + y), h);
        *img.get_pixel(sx, sy)
    })
}

pub fn resize_bicubic(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    if img.width() == width && img.height() == height {
        return img.clone();
    }
    image::imageops::resize(img, width, height, image::imageops::FilterType::CatmullRom)
}

/// Normalised 1-D Gaussian kernel truncated at 4 sigma.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur on an f64 plane with replicated borders.
pub fn blur_plane(plane: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let sx = (x as i64 + j as i64 - r).clamp(0, width as i64 - 1) as usize;
                acc += kv * row[sx];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let sy = (y as i64 + j as i64 - r).clamp(0, height as i64 - 1) as usize;
                acc += kv * tmp[sy * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

pub fn to_planes(img: &RgbImage) -> [Vec<f64>; 3] {
    let n = (img.width() * img.height()) as usize;
    let mut planes = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            planes[c][i] = f64::from(p[c]);
        }
    }
    planes
}

pub fn from_planes(planes: &[Vec<f64>; 3], width: u32, height: u32) -> RgbImage {
    RgbImage::from_fn(width, height, |x, y| {
        let i = (y * width + x) as usize;
        image::Rgb([0, 1, 2].map(|c| quantize(planes[c][i])))
    })
}

/// Round to nearest and saturate into `u8`.
pub fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

pub fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let planes = to_planes(img);
    let blurred = [0, 1, 2].map(|c| blur_plane(&planes[c], w, h, sigma));
    from_planes(&blurred, img.width(), img.height())
}

/// ITU-R BT.601 luma, row-major.
pub fn luma(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .map(|p| 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalised_and_truncated_at_four_sigma() {
        let k = gaussian_kernel(1.5);
        assert_eq!(k.len(), 2 * 6 + 1);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reflect_padding_mirrors_without_repeating_edge() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(9, 5), 1);
        assert_eq!(reflect_index(3, 1), 0);
    }

    #[test]
    fn crop_reflect_inside_is_plain_crop() {
        let img = RgbImage::from_fn(10, 8, |x, y| image::Rgb([x as u8, y as u8, 0]));
        let r = Rect::new(2, 1, 5, 5);
        assert_eq!(crop_reflect(&img, r), crop(&img, r));
        let padded = crop_reflect(&img, Rect::new(0, 0, 12, 8));
        assert_eq!(padded.get_pixel(10, 0)[0], 8);
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = RgbImage::from_pixel(20, 20, image::Rgb([90, 10, 200]));
        assert_eq!(gaussian_blur(&img, 2.0), img);
    }
}
