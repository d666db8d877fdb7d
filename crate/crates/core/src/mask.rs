//! Binary masks with COCO run-length encoding and polygon rasterisation.
//!
//! COCO RLE is column-major (Fortran order) and always starts with a run of
//! zeros, possibly of length 0.

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::raster::Rect;
use crate::{Error, Result};

/// Row-major 0/1 mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

/// Uncompressed COCO RLE: `{"size": [h, w], "counts": [...]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub size: [u32; 2],
    pub counts: Vec<u32>,
}

impl BinaryMask {
    pub fn empty(width: u32, height: u32) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![0; (width as usize) * (height as usize)],
        }
    }

    pub fn full(width: u32, height: u32) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![1; (width as usize) * (height as usize)],
        }
    }

    pub fn from_rect(width: u32, height: u32, r: Rect) -> Self {
        let mut m = Self::empty(width, height);
        for y in r.y..(r.y + r.h).min(height) {
            for x in r.x..(r.x + r.w).min(width) {
                m.set(x, y, true);
            }
        }
        m
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut m = Self::empty(width, height);
        for y in 0..height {
            for x in 0..width {
                m.set(x, y, f(x, y));
            }
        }
        m
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize] != 0
    }

    pub fn set(&mut self, x: u32, y: u32, on: bool) {
        self.data[(y * self.width + x) as usize] = u8::from(on);
    }

    pub fn popcount(&self) -> u64 {
        self.data.iter().map(|&v| u64::from(v)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Tight bounding rectangle of the set pixels, `None` for an empty mask.
    pub fn bbox(&self) -> Option<Rect> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        any.then(|| Rect::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    }

    /// Sub-mask covering `r`; `r` must lie inside the mask.
    pub fn crop(&self, r: Rect) -> BinaryMask {
        BinaryMask::from_fn(r.w, r.h, |x, y| self.get(r.x + x, r.y + y))
    }

    /// 8-bit grayscale image with 0 / 255 values.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| Luma([if self.get(x, y) { 255 } else { 0 }]))
    }

    /// Any nonzero pixel is treated as set.
    pub fn from_gray(img: &GrayImage) -> Self {
        BinaryMask::from_fn(img.width(), img.height(), |x, y| img.get_pixel(x, y)[0] != 0)
    }

    pub fn to_png(&self) -> Vec<u8> {
        use image::ImageEncoder;
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out)
            .write_image(self.to_gray().as_raw(), self.width, self.height, image::ExtendedColorType::L8)
            .expect("png encoding into memory cannot fail");
        out
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_luma8();
        Ok(Self::from_gray(&img))
    }

    pub fn to_rle(&self) -> Rle {
        let mut counts = Vec::new();
        let mut current = 0u8;
        let mut run = 0u32;
        for x in 0..self.width {
            for y in 0..self.height {
                let v = u8::from(self.get(x, y));
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        Rle {
            size: [self.height, self.width],
            counts,
        }
    }

    pub fn from_rle(rle: &Rle) -> Result<Self> {
        let [h, w] = rle.size;
        let total: u64 = rle.counts.iter().map(|&c| u64::from(c)).sum();
        if total != u64::from(w) * u64::from(h) {
            return Err(Error::Annotations(format!(
                "rle counts sum to {total}, expected {}",
                u64::from(w) * u64::from(h)
            )));
        }
        let mut m = Self::empty(w, h);
        let mut idx = 0u64;
        for (i, &c) in rle.counts.iter().enumerate() {
            if i % 2 == 1 {
                for k in idx..idx + u64::from(c) {
                    let x = (k / u64::from(h)) as u32;
                    let y = (k % u64::from(h)) as u32;
                    m.set(x, y, true);
                }
            }
            idx += u64::from(c);
        }
        Ok(m)
    }

    /// Even-odd fill of one or more polygons (flat `[x0, y0, x1, y1, ...]`),
    /// sampling pixel centres.
    pub fn from_polygons(width: u32, height: u32, polygons: &[Vec<f64>]) -> Self {
        let mut m = Self::empty(width, height);
        for poly in polygons {
            let pts: Vec<(f64, f64)> = poly.chunks_exact(2).map(|c| (c[0], c[1])).collect();
            if pts.len() < 3 {
                continue;
            }
            for y in 0..height {
                let cy = f64::from(y) + 0.5;
                let mut xs = Vec::new();
                for i in 0..pts.len() {
                    let (ax, ay) = pts[i];
                    let (bx, by) = pts[(i + 1) % pts.len()];
                    if (ay <= cy) != (by <= cy) {
                        xs.push(ax + (cy - ay) / (by - ay) * (bx - ax));
                    }
                }
                xs.sort_by(f64::total_cmp);
                for pair in xs.chunks_exact(2) {
                    for x in 0..width {
                        let cx = f64::from(x) + 0.5;
                        if cx >= pair[0] && cx < pair[1] {
                            m.set(x, y, true);
                        }
                    }
                }
            }
        }
        m
    }
}

/// Encode RLE counts in the compact COCO string form.
pub fn rle_counts_to_string(counts: &[u32]) -> String {
    let mut s = String::new();
    for (i, &c) in counts.iter().enumerate() {
        let mut x = i64::from(c);
        if i > 2 {
            x -= i64::from(counts[i - 2]);
        }
        loop {
            let mut ch = (x & 0x1f) as u8;
            x >>= 5;
            let more = if ch & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                ch |= 0x20;
            }
            s.push(char::from(ch + 48));
            if !more {
                break;
            }
        }
    }
    s
}

/// Decode the compact COCO string form back into run lengths.
pub fn rle_counts_from_string(s: &str) -> Result<Vec<u32>> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        loop {
            let c = i64::from(bytes[p].checked_sub(48).ok_or_else(|| {
                Error::Annotations(format!("invalid rle character {:?}", bytes[p] as char))
            })?);
            x |= (c & 0x1f) << (5 * k);
            let more = c & 0x20 != 0;
            p += 1;
            k += 1;
            if !more {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
            if p >= bytes.len() {
                return Err(Error::Annotations("truncated rle string".into()));
            }
        }
        let m = counts.len();
        if m > 2 {
            x += counts[m - 2];
        }
        counts.push(x);
    }
    counts
        .into_iter()
        .map(|c| u32::try_from(c).map_err(|_| Error::Annotations(format!("negative rle run {c}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rle_is_column_major_and_starts_with_zeros() {
        // 3x2 (w x h), column 0 = [1, 0], column 1 = [1, 1], column 2 = [0, 0]
        let mut m = BinaryMask::empty(3, 2);
        m.set(0, 0, true);
        m.set(1, 0, true);
        m.set(1, 1, true);
        let rle = m.to_rle();
        assert_eq!(rle.size, [2, 3]);
        assert_eq!(rle.counts, vec![0, 1, 1, 2, 2]);
        assert_eq!(BinaryMask::from_rle(&rle).unwrap(), m);
    }

    #[test]
    fn rle_string_matches_known_coco_encoding() {
        // 4x4 mask with a 2x2 block at (1,1); runs 3.. are delta-coded against i-2
        let counts = vec![5, 2, 2, 2, 5];
        let s = rle_counts_to_string(&counts);
        assert_eq!(s, "52203");
        assert_eq!(rle_counts_from_string(&s).unwrap(), counts);
    }

    #[test]
    fn rle_with_wrong_total_is_rejected() {
        let rle = Rle { size: [2, 2], counts: vec![1, 1] };
        assert!(BinaryMask::from_rle(&rle).is_err());
    }

    #[test]
    fn polygon_square_fills_pixel_centres() {
        let m = BinaryMask::from_polygons(10, 10, &[vec![2.0, 2.0, 6.0, 2.0, 6.0, 5.0, 2.0, 5.0]]);
        assert_eq!(m.popcount(), 12);
        assert_eq!(m.bbox(), Some(Rect::new(2, 2, 4, 3)));
    }

    #[test]
    fn bbox_of_empty_mask_is_none() {
        assert_eq!(BinaryMask::empty(4, 4).bbox(), None);
    }

    proptest! {
        #[test]
        fn rle_roundtrip(w in 1u32..24, h in 1u32..24, bits in proptest::collection::vec(any::<bool>(), 576)) {
            let m = BinaryMask::from_fn(w, h, |x, y| bits[(y * 24 + x) as usize]);
            let rle = m.to_rle();
            prop_assert_eq!(BinaryMask::from_rle(&rle).unwrap(), m.clone());
            let s = rle_counts_to_string(&rle.counts);
            prop_assert_eq!(rle_counts_from_string(&s).unwrap(), rle.counts);
        }
    }
}
