//! Averaged power spectra of image differences.
//!
//! Each pair contributes `|FFT(a - b)|^2 / S^2` computed on the central `S x S`
//! crop of the BT.601 luma, so the grid total divided by `S^2` equals the mean
//! squared pixel difference. No window is applied. Grids are stored DC-centred
//! (DC at `(S/2, S/2)`).

use std::path::Path;

use image::{GrayImage, RgbImage};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::raster;
use crate::{Error, Result};

pub const DEFAULT_SIZE: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    RealVsRecon,
    RealVsSelfcond,
    ReconVsSelfcond,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumMap {
    pub size: usize,
    /// Row-major `size x size`, DC-centred.
    pub power: Vec<f64>,
    pub count: usize,
    pub pair_kind: PairKind,
    pub radial_profile: Vec<f64>,
}

impl SpectrumMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.power[row * self.size + col]
    }

    pub fn total(&self) -> f64 {
        self.power.iter().sum()
    }
}

/// In-place 2-D FFT of a row-major `w x h` grid.
pub fn fft2(grid: &mut [Complex<f64>], width: usize, height: usize, planner: &mut FftPlanner<f64>) {
    let row_fft = planner.plan_fft_forward(width);
    for row in grid.chunks_exact_mut(width) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(height);
    let mut col = vec![Complex::new(0.0, 0.0); height];
    for x in 0..width {
        for y in 0..height {
            col[y] = grid[y * width + x];
        }
        col_fft.process(&mut col);
        for y in 0..height {
            grid[y * width + x] = col[y];
        }
    }
}

/// `|FFT|^2 / (w h)` of a real plane, in natural (DC at index 0) order.
pub fn power_spectrum(plane: &[f64], width: usize, height: usize, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let mut grid: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2(&mut grid, width, height, planner);
    let norm = (width * height) as f64;
    grid.iter().map(|c| c.norm_sqr() / norm).collect()
}

/// Move DC from index 0 to `(size/2, size/2)`.
pub fn fftshift(grid: &[f64], size: usize) -> Vec<f64> {
    let h = size / 2;
    let mut out = vec![0.0; grid.len()];
    for y in 0..size {
        for x in 0..size {
            out[((y + h) % size) * size + (x + h) % size] = grid[y * size + x];
        }
    }
    out
}

/// Running sum that adds equal-count partial sums pairwise, so the rounding
/// pattern depends only on the number of terms.
struct PairwiseSum {
    stack: Vec<(usize, Vec<f64>)>,
}

impl PairwiseSum {
    fn new() -> Self {
        PairwiseSum { stack: Vec::new() }
    }

    fn push(&mut self, v: Vec<f64>) {
        let mut item = (1usize, v);
        while let Some((n, _)) = self.stack.last() {
            if *n != item.0 {
                break;
            }
            let (n, top) = self.stack.pop().expect("nonempty");
            let merged: Vec<f64> = top.iter().zip(&item.1).map(|(a, b)| a + b).collect();
            item = (n + item.0, merged);
        }
        self.stack.push(item);
    }

    fn finish(self) -> Option<Vec<f64>> {
        self.stack.into_iter().rev().map(|(_, v)| v).reduce(|acc, v| acc.iter().zip(&v).map(|(a, b)| a + b).collect())
    }
}

/// Central `size x size` luma crop, `None` if the image is smaller.
pub fn central_luma(img: &RgbImage, size: usize) -> Option<Vec<f64>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w < size || h < size {
        return None;
    }
    let (x0, y0) = ((w - size) / 2, (h - size) / 2);
    let l = raster::luma(img);
    Some((0..size).flat_map(|y| l[(y0 + y) * w + x0..(y0 + y) * w + x0 + size].to_vec()).collect())
}

/// Average power spectrum of `a - b` over pre-cropped `size x size` planes.
pub fn diff_power_spectrum_planes(pairs: &[(Vec<f64>, Vec<f64>)], size: usize, kind: PairKind) -> Result<SpectrumMap> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no image pairs".into()));
    }
    let mut planner = FftPlanner::new();
    let mut sum = PairwiseSum::new();
    let mut count = 0;
    for (a, b) in pairs {
        if a.len() != size * size || b.len() != size * size {
            log::warn!("skipping pair with plane sizes {} / {}", a.len(), b.len());
            continue;
        }
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        sum.push(power_spectrum(&diff, size, size, &mut planner));
        count += 1;
    }
    let total = sum.finish().ok_or_else(|| Error::InvalidArgument("no usable image pairs".into()))?;
    let mean: Vec<f64> = total.iter().map(|v| v / count as f64).collect();
    let mut map = SpectrumMap {
        size,
        power: fftshift(&mean, size),
        count,
        pair_kind: kind,
        radial_profile: Vec::new(),
    };
    map.radial_profile = radial_profile(&map, DEFAULT_BANDS);
    Ok(map)
}

pub const DEFAULT_BANDS: usize = 32;

/// Spectrum of differences over aligned image pairs. Pairs whose dimensions
/// disagree, or that are smaller than `size`, are skipped with a warning.
pub fn diff_power_spectrum(pairs: &[(RgbImage, RgbImage)], size: usize, kind: PairKind) -> Result<SpectrumMap> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no image pairs".into()));
    }
    let planes: Vec<(Vec<f64>, Vec<f64>)> = pairs
        .iter()
        .filter_map(|(a, b)| {
            if a.dimensions() != b.dimensions() {
                log::warn!("skipping misaligned pair {:?} vs {:?}", a.dimensions(), b.dimensions());
                return None;
            }
            Some((central_luma(a, size)?, central_luma(b, size)?))
        })
        .collect();
    diff_power_spectrum_planes(&planes, size, kind)
}

/// Mean power in `bands` equal-width annuli from DC to Nyquist (`size / 2`).
/// Bins beyond Nyquist (the corners) are not counted.
pub fn radial_profile(map: &SpectrumMap, bands: usize) -> Vec<f64> {
    radial_bands(&map.power, map.size, bands, true)
}

/// [`radial_profile`] over a DC-centred `size x size` power plane, optionally
/// leaving the DC bin out of band 0.
pub fn radial_bands(power: &[f64], size: usize, bands: usize, include_dc: bool) -> Vec<f64> {
    let bands = bands.max(1);
    let c = (size / 2) as f64;
    let nyquist = c.max(1.0);
    let mut sum = vec![0.0; bands];
    let mut cnt = vec![0usize; bands];
    for y in 0..size {
        for x in 0..size {
            let r = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
            if r > nyquist || (!include_dc && r == 0.0) {
                continue;
            }
            let b = ((r / nyquist * bands as f64) as usize).min(bands - 1);
            sum[b] += power[y * size + x];
            cnt[b] += 1;
        }
    }
    sum.iter().zip(&cnt).map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 }).collect()
}

pub fn heatmap(map: &SpectrumMap) -> GrayImage {
    let logv: Vec<f64> = map.power.iter().map(|p| p.max(0.0).ln_1p()).collect();
    let max = logv.iter().copied().fold(0.0, f64::max);
    let s = map.size as u32;
    GrayImage::from_fn(s, s, |x, y| {
        let v = logv[(y * s + x) as usize];
        image::Luma([if max > 0.0 { raster::quantize(255.0 * v / max) } else { 0 }])
    })
}

/// Writes `spectrum.csv`, `radial.csv` and `spectrum.png` into `dir`.
pub fn emit_spectrum(map: &SpectrumMap, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut grid = String::new();
    for row in map.power.chunks_exact(map.size) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        grid.push_str(&cells.join(","));
        grid.push('\n');
    }
    raster::write_bytes(&dir.join("spectrum.csv"), grid.as_bytes())?;

    let bands = map.radial_profile.len().max(1);
    let nyquist = (map.size / 2) as f64;
    let mut radial = String::from("band,r_lo,r_hi,power\n");
    for (b, p) in map.radial_profile.iter().enumerate() {
        radial.push_str(&format!(
            "{b},{},{},{p:e}\n",
            nyquist * b as f64 / bands as f64,
            nyquist * (b + 1) as f64 / bands as f64
        ));
    }
    raster::write_bytes(&dir.join("radial.csv"), radial.as_bytes())?;

    let png_path = dir.join("spectrum.png");
    heatmap(map).save(&png_path).map_err(Error::from)
}

/// Parse a grid written by [`emit_spectrum`].
pub fn read_spectrum_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.parse::<f64>().map_err(|e| Error::InvalidArgument(format!("bad cell {v:?}: {e}"))))
                .collect()
        })
        .collect()
}
