//! Synthetic scenes for fixtures and demos: a colour gradient with random
//! filled shapes and sensor-like noise, optionally softened.

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use std::path::Path;

use crate::coco::{CocoAnnotation, CocoCategory, CocoFile, CocoImage, CocoLicense, Segmentation};
use crate::raster;
use crate::rng::keyed_rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneStyle {
    pub shapes: (u32, u32),
    pub noise_sigma: f64,
    /// Gaussian blur applied last; 0 keeps edges hard.
    pub blur_sigma: f64,
}

impl Default for SceneStyle {
    fn default() -> Self {
        SceneStyle {
            shapes: (6, 14),
            noise_sigma: 3.0,
            blur_sigma: 0.0,
        }
    }
}

fn colour(rng: &mut impl Rng) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.random_range(20.0..235.0))
}

pub fn scene(width: u32, height: u32, seed: u64, style: &SceneStyle) -> RgbImage {
    let mut rng = keyed_rng(seed, &["scene"]);
    let (c0, c1) = (colour(&mut rng), colour(&mut rng));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let diag = f64::from(width.max(height)).max(1.0);
    let mut planes = [0, 1, 2].map(|_| vec![0.0; (width * height) as usize]);
    for y in 0..height {
        for x in 0..width {
            let t = (((f64::from(x) * ca + f64::from(y) * sa) / diag) * 0.5 + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                planes[c][(y * width + x) as usize] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }

    let n = rng.random_range(style.shapes.0..=style.shapes.1.max(style.shapes.0));
    for _ in 0..n {
        let fill = colour(&mut rng);
        let cx = rng.random_range(0.0..f64::from(width));
        let cy = rng.random_range(0.0..f64::from(height));
        let rx = rng.random_range(0.05..0.3) * f64::from(width);
        let ry = rng.random_range(0.05..0.3) * f64::from(height);
        let ellipse = rng.random_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let dx = (f64::from(x) + 0.5 - cx) / rx;
                let dy = (f64::from(y) + 0.5 - cy) / ry;
                let inside = if ellipse { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
                if inside {
                    for c in 0..3 {
                        planes[c][(y * width + x) as usize] = fill[c];
                    }
                }
            }
        }
    }

    if style.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, style.noise_sigma).expect("finite sigma");
        for p in planes.iter_mut() {
            p.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
    }
    if style.blur_sigma > 0.0 {
        for p in planes.iter_mut() {
            *p = raster::blur_plane(p, width as usize, height as usize, style.blur_sigma);
        }
    }
    raster::from_planes(&planes, width, height)
}

/// Solid-colour image.
pub fn flat(width: u32, height: u32, rgb: [u8; 3]) -> RgbImage {
    RgbImage::from_pixel(width, height, Rgb(rgb))
}

const FIXTURE_CATEGORIES: [(u64, &str, &str); 4] =
    [(1, "cat", "animal"), (2, "dog", "animal"), (3, "car", "vehicle"), (4, "bus", "vehicle")];

/// Write `n` scene PNGs to `dir/images` and a COCO file `dir/annotations.json`.
/// The last `unannotated` images get no objects; the rest get one or two
/// rectangular polygons. Returns the annotation file path.
pub fn write_fixture_dataset(dir: &Path, n: usize, unannotated: usize, width: u32, height: u32, seed: u64) -> Result<std::path::PathBuf> {
    let images_dir = dir.join("images");
    let mut coco = CocoFile {
        licenses: vec![CocoLicense {
            id: 1,
            name: "Attribution License".into(),
            url: "http://creativecommons.org/licenses/by/2.0/".into(),
        }],
        images: Vec::new(),
        annotations: Vec::new(),
        categories: FIXTURE_CATEGORIES
            .iter()
            .map(|&(id, name, sup)| CocoCategory {
                id,
                name: name.into(),
                supercategory: sup.into(),
            })
            .collect(),
    };
    let mut rng = keyed_rng(seed, &["fixture"]);
    for i in 0..n {
        let id = i as u64 + 1;
        let file_name = format!("img{id:04}.png");
        let img = scene(width, height, seed.wrapping_add(id), &SceneStyle::default());
        raster::write_bytes(&images_dir.join(&file_name), &raster::encode_png(&img))?;
        coco.images.push(CocoImage {
            id,
            file_name,
            width,
            height,
            license: Some(1),
        });
        if i + unannotated >= n {
            continue;
        }
        for _ in 0..rng.random_range(1..=2) {
            let (w, h) = (f64::from(width), f64::from(height));
            let x0 = rng.random_range(0.1..0.5) * w;
            let y0 = rng.random_range(0.1..0.5) * h;
            let x1 = x0 + rng.random_range(0.15..0.4) * w;
            let y1 = y0 + rng.random_range(0.15..0.4) * h;
            coco.annotations.push(CocoAnnotation {
                id: coco.annotations.len() as u64 + 1,
                image_id: id,
                category_id: FIXTURE_CATEGORIES[rng.random_range(0..FIXTURE_CATEGORIES.len())].0,
                segmentation: Segmentation::Polygons(vec![vec![x0, y0, x1, y0, x1, y1, x0, y1]]),
                bbox: vec![x0, y0, x1 - x0, y1 - y0],
                iscrowd: 0,
            });
        }
    }
    let path = dir.join("annotations.json");
    let text = serde_json::to_string_pretty(&coco)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
