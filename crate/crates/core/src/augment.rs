//! Perturbations, augmentation tiers and social-network simulation.
//!
//! Sampling is kept apart from application: every `sample_*` function is a
//! pure function of `(policy, seed)` returning the concrete operations, and
//! [`apply_perturbation`] executes one of them. Each operation draws from its
//! own keyed stream (`seed`, op name), so enabling an op never changes the
//! draws of another.

use image::RgbImage;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::manifest::Variant;
use crate::raster::{self, Rect};
use crate::rng::keyed_rng;
use crate::{Error, Result};

/// Smallest side any perturbation may produce.
pub const MIN_SIDE: u32 = 16;
pub const MID_GRAY: u8 = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbationSpec {
    /// Leaves the image untouched; the reference point of a sweep.
    None,
    Jpeg { qf: u8 },
    /// Bicubic resize to `round(scale * dim)`.
    Resize { scale: f64 },
    /// Gaussian kernel truncated at 4 sigma.
    Blur { sigma: f64 },
    /// Additive Gaussian noise, 8-bit units.
    Noise { sigma: f64 },
    /// Mid-gray rectangle covering `frac` of the area.
    Cutout { frac: f64 },
    /// Per-channel `out = (x - mean)(1 + contrast) + mean (1 + brightness)`.
    Jitter { brightness: [f64; 3], contrast: [f64; 3] },
    /// Resize by `scale`, then a random crop no larger than `max_side`.
    ScaleCrop { scale: f64, max_side: u32 },
}

impl PerturbationSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            PerturbationSpec::None => "none",
            PerturbationSpec::Jpeg { .. } => "jpeg",
            PerturbationSpec::Resize { .. } => "resize",
            PerturbationSpec::Blur { .. } => "blur",
            PerturbationSpec::Noise { .. } => "noise",
            PerturbationSpec::Cutout { .. } => "cutout",
            PerturbationSpec::Jitter { .. } => "jitter",
            PerturbationSpec::ScaleCrop { .. } => "scale_crop",
        }
    }

    /// The swept parameter, for tabulation.
    pub fn param(&self) -> f64 {
        match *self {
            PerturbationSpec::None => 0.0,
            PerturbationSpec::Jpeg { qf } => f64::from(qf),
            PerturbationSpec::Resize { scale } | PerturbationSpec::ScaleCrop { scale, .. } => scale,
            PerturbationSpec::Blur { sigma } | PerturbationSpec::Noise { sigma } => sigma,
            PerturbationSpec::Cutout { frac } => frac,
            PerturbationSpec::Jitter { brightness, .. } => brightness[0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        match *self {
            PerturbationSpec::Jpeg { qf } if !(1..=100).contains(&qf) => bad(format!("jpeg qf {qf} outside 1..=100")),
            PerturbationSpec::Resize { scale } | PerturbationSpec::ScaleCrop { scale, .. } if !(scale > 0.0 && scale.is_finite()) => {
                bad(format!("scale {scale} must be > 0"))
            }
            PerturbationSpec::Blur { sigma } | PerturbationSpec::Noise { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                bad(format!("sigma {sigma} must be >= 0"))
            }
            PerturbationSpec::Cutout { frac } if !(0.0..=1.0).contains(&frac) => bad(format!("cutout frac {frac} outside [0, 1]")),
            _ => Ok(()),
        }
    }
}

fn scaled_dims(img: &RgbImage, scale: f64) -> Result<(u32, u32)> {
    let w = (scale * f64::from(img.width())).round() as u32;
    let h = (scale * f64::from(img.height())).round() as u32;
    if w < MIN_SIDE || h < MIN_SIDE {
        return Err(Error::DegenerateSize { width: w, height: h });
    }
    Ok((w, h))
}

/// Rectangle of roughly `frac` of the image area with the image's aspect,
/// placed uniformly so that it lies fully inside.
fn random_rect(width: u32, height: u32, frac: f64, rng: &mut impl Rng) -> Rect {
    let side = frac.clamp(0.0, 1.0).sqrt();
    let w = ((f64::from(width) * side).round() as u32).min(width);
    let h = ((f64::from(height) * side).round() as u32).min(height);
    let x = rng.random_range(0..=width - w);
    let y = rng.random_range(0..=height - h);
    Rect::new(x, y, w, h)
}

/// Apply one operation. Random parts (noise field, cutout/crop position) come
/// from streams keyed by `seed`.
pub fn apply_perturbation(img: &RgbImage, spec: &PerturbationSpec, seed: u64) -> Result<RgbImage> {
    spec.validate()?;
    match *spec {
        PerturbationSpec::None => Ok(img.clone()),
        PerturbationSpec::Jpeg { qf } => raster::jpeg_roundtrip(img, qf),
        PerturbationSpec::Resize { scale } => {
            let (w, h) = scaled_dims(img, scale)?;
            Ok(raster::resize_bicubic(img, w, h))
        }
        PerturbationSpec::Blur { sigma } => Ok(raster::gaussian_blur(img, sigma)),
        PerturbationSpec::Noise { sigma } => {
            if sigma == 0.0 {
                return Ok(img.clone());
            }
            let mut rng = keyed_rng(seed, &["noise"]);
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            let mut out = img.clone();
            for p in out.pixels_mut() {
                for c in 0..3 {
                    p[c] = raster::quantize(f64::from(p[c]) + normal.sample(&mut rng));
                }
            }
            Ok(out)
        }
        PerturbationSpec::Cutout { frac } => {
            let mut rng = keyed_rng(seed, &["cutout"]);
            let r = random_rect(img.width(), img.height(), frac, &mut rng);
            let mut out = img.clone();
            for y in r.y..r.y + r.h {
                for x in r.x..r.x + r.w {
                    out.put_pixel(x, y, image::Rgb([MID_GRAY; 3]));
                }
            }
            Ok(out)
        }
        PerturbationSpec::Jitter { brightness, contrast } => {
            let planes = raster::to_planes(img);
            let jittered = [0, 1, 2].map(|c| {
                let mean = planes[c].iter().sum::<f64>() / planes[c].len().max(1) as f64;
                planes[c]
                    .iter()
                    .map(|x| (x - mean) * (1.0 + contrast[c]) + mean * (1.0 + brightness[c]))
                    .collect()
            });
            Ok(raster::from_planes(&jittered, img.width(), img.height()))
        }
        PerturbationSpec::ScaleCrop { scale, max_side } => {
            let (w, h) = scaled_dims(img, scale)?;
            let scaled = raster::resize_bicubic(img, w, h);
            let (cw, ch) = (w.min(max_side), h.min(max_side));
            if cw < MIN_SIDE || ch < MIN_SIDE {
                return Err(Error::DegenerateSize { width: cw, height: ch });
            }
            let mut rng = keyed_rng(seed, &["scale_crop"]);
            let x = rng.random_range(0..=w - cw);
            let y = rng.random_range(0..=h - ch);
            Ok(raster::crop(&scaled, Rect::new(x, y, cw, ch)))
        }
    }
}

pub fn apply_all(img: &RgbImage, ops: &[PerturbationSpec], seed: u64) -> Result<RgbImage> {
    let mut out = img.clone();
    for op in ops {
        out = apply_perturbation(&out, op, seed)?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    Standard,
    CutmixMixup,
    Inpainted,
    InpaintedPlus,
    InpaintedPlusPlus,
}

/// Closed interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugPolicy {
    pub name: PolicyName,
    pub p_blur: f64,
    pub blur_sigma: Range,
    pub p_jpeg: f64,
    pub jpeg_qf: (u8, u8),
    pub p_cutmix: f64,
    pub p_mixup: f64,
    pub p_scale_crop: f64,
    pub scale: Range,
    pub crop_max: u32,
    pub p_cutout: f64,
    pub cutout_frac: Range,
    pub p_noise: f64,
    pub noise_sigma: Range,
    pub p_jitter: f64,
    /// Brightness and contrast deltas are drawn from `[-jitter, jitter]`.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for AugPolicy {
    fn default() -> Self {
        AugPolicy::preset(PolicyName::Standard)
    }
}

impl AugPolicy {
    pub fn preset(name: PolicyName) -> Self {
        let plus_plus = name == PolicyName::InpaintedPlusPlus;
        let mixing = name == PolicyName::CutmixMixup;
        let extra = if plus_plus { 0.1 } else { 0.0 };
        AugPolicy {
            name,
            p_blur: 0.5,
            blur_sigma: Range::new(0.0, 3.0),
            p_jpeg: 0.5,
            jpeg_qf: (30, 100),
            p_cutmix: if mixing { 0.25 } else { 0.0 },
            p_mixup: if mixing { 0.25 } else { 0.0 },
            p_scale_crop: extra,
            scale: Range::new(0.5, 2.0),
            crop_max: 504,
            p_cutout: extra,
            cutout_frac: Range::new(0.02, 0.25),
            p_noise: extra,
            noise_sigma: Range::new(0.0, 5.0),
            p_jitter: extra,
            jitter: 0.1,
            seed: 0,
        }
    }

    /// Every probability and range disabled.
    pub fn identity() -> Self {
        AugPolicy {
            p_blur: 0.0,
            p_jpeg: 0.0,
            ..AugPolicy::preset(PolicyName::Standard)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.p_blur,
            self.p_jpeg,
            self.p_cutmix,
            self.p_mixup,
            self.p_scale_crop,
            self.p_cutout,
            self.p_noise,
            self.p_jitter,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        let ranges = [self.blur_sigma, self.scale, self.cutout_frac, self.noise_sigma];
        if ranges.iter().any(|r| !(r.lo <= r.hi)) || self.jpeg_qf.0 > self.jpeg_qf.1 || self.jpeg_qf.0 == 0 {
            return Err(Error::Config("augmentation ranges must be non-empty".into()));
        }
        if self.scale.lo <= 0.0 || self.jpeg_qf.1 > 100 || self.cutout_frac.hi > 1.0 {
            return Err(Error::Config("augmentation range out of domain".into()));
        }
        Ok(())
    }

    /// Fake variants a policy trains on.
    pub fn training_variants(&self) -> &'static [Variant] {
        match self.name {
            PolicyName::Standard | PolicyName::CutmixMixup => &[Variant::SelfCond],
            PolicyName::Inpainted => &[Variant::SelfCond, Variant::InpaintSame, Variant::InpaintSameBg],
            PolicyName::InpaintedPlus | PolicyName::InpaintedPlusPlus => &Variant::FAKES,
        }
    }
}

/// Blur then JPEG, each with its own probability.
pub fn sample_standard(policy: &AugPolicy, seed: u64) -> Vec<PerturbationSpec> {
    let mut ops = Vec::new();
    let mut rng = keyed_rng(seed, &["blur"]);
    if rng.random::<f64>() < policy.p_blur {
        ops.push(PerturbationSpec::Blur {
            sigma: policy.blur_sigma.sample(&mut rng),
        });
    }
    let mut rng = keyed_rng(seed, &["jpeg"]);
    if rng.random::<f64>() < policy.p_jpeg {
        ops.push(PerturbationSpec::Jpeg {
            qf: rng.random_range(policy.jpeg_qf.0..=policy.jpeg_qf.1),
        });
    }
    ops
}

pub fn standard_aug(img: &RgbImage, policy: &AugPolicy, seed: u64) -> Result<(RgbImage, Vec<PerturbationSpec>)> {
    let ops = sample_standard(policy, seed);
    Ok((apply_all(img, &ops, seed)?, ops))
}

/// scale_crop, cutout, noise, jitter: each independent, in this order.
pub fn sample_inpaintedpp(policy: &AugPolicy, seed: u64) -> Vec<PerturbationSpec> {
    let mut ops = Vec::new();
    let mut rng = keyed_rng(seed, &["pp_scale_crop"]);
    if rng.random::<f64>() < policy.p_scale_crop {
        ops.push(PerturbationSpec::ScaleCrop {
            scale: policy.scale.sample(&mut rng),
            max_side: policy.crop_max,
        });
    }
    let mut rng = keyed_rng(seed, &["pp_cutout"]);
    if rng.random::<f64>() < policy.p_cutout {
        ops.push(PerturbationSpec::Cutout {
            frac: policy.cutout_frac.sample(&mut rng),
        });
    }
    let mut rng = keyed_rng(seed, &["pp_noise"]);
    if rng.random::<f64>() < policy.p_noise {
        ops.push(PerturbationSpec::Noise {
            sigma: policy.noise_sigma.sample(&mut rng),
        });
    }
    let mut rng = keyed_rng(seed, &["pp_jitter"]);
    if rng.random::<f64>() < policy.p_jitter {
        let j = policy.jitter;
        let mut d = || rng.random_range(-j..=j);
        ops.push(PerturbationSpec::Jitter {
            brightness: [d(), d(), d()],
            contrast: [d(), d(), d()],
        });
    }
    ops
}

/// Post-processing of the inpainted++ tier.
pub fn inpaintedpp_post(img: &RgbImage, policy: &AugPolicy, seed: u64) -> Result<(RgbImage, Vec<PerturbationSpec>)> {
    let ops = sample_inpaintedpp(policy, seed);
    Ok((apply_all(img, &ops, seed)?, ops))
}

/// Full per-sample pipeline of a policy: standard ops, plus the inpainted++
/// post-processing when the tier asks for it.
pub fn augment(img: &RgbImage, policy: &AugPolicy, seed: u64) -> Result<RgbImage> {
    let (mut out, _) = standard_aug(img, policy, seed)?;
    if policy.name == PolicyName::InpaintedPlusPlus {
        out = inpaintedpp_post(&out, policy, seed)?.0;
    }
    Ok(out)
}

fn same_dims(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", a.dimensions(), b.dimensions())));
    }
    Ok(())
}

/// Paste a rectangle of area fraction `1 - lambda` from `b` into `a`.
/// Returns the image and the label weight of `a` (one minus the pasted area
/// fraction actually realised after rounding).
pub fn cutmix(a: &RgbImage, b: &RgbImage, lambda: f64, seed: u64) -> Result<(RgbImage, f64)> {
    same_dims(a, b)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    let mut rng = keyed_rng(seed, &["cutmix"]);
    let r = random_rect(a.width(), a.height(), 1.0 - lambda, &mut rng);
    let mut out = a.clone();
    for y in r.y..r.y + r.h {
        for x in r.x..r.x + r.w {
            out.put_pixel(x, y, *b.get_pixel(x, y));
        }
    }
    let total = f64::from(a.width()) * f64::from(a.height());
    Ok((out, 1.0 - r.area() as f64 / total))
}

/// Pixelwise `lambda a + (1 - lambda) b`, rounded to nearest.
pub fn mixup(a: &RgbImage, b: &RgbImage, lambda: f64) -> Result<RgbImage> {
    same_dims(a, b)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(RgbImage::from_fn(a.width(), a.height(), |x, y| {
        let (pa, pb) = (a.get_pixel(x, y), b.get_pixel(x, y));
        image::Rgb([0, 1, 2].map(|c| raster::quantize(lambda * f64::from(pa[c]) + (1.0 - lambda) * f64::from(pb[c]))))
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SocialParams {
    pub scale: f64,
    pub qf: u8,
}

pub const SOCIAL_SCALE: Range = Range::new(0.7, 1.0);
pub const SOCIAL_QF: (u8, u8) = (70, 100);

pub fn sample_social(seed: u64) -> SocialParams {
    let mut rng = keyed_rng(seed, &["social_scale"]);
    let scale = SOCIAL_SCALE.sample(&mut rng);
    let mut rng = keyed_rng(seed, &["social_qf"]);
    SocialParams {
        scale,
        qf: rng.random_range(SOCIAL_QF.0..=SOCIAL_QF.1),
    }
}

/// Resize by `s ~ U[0.7, 1]`, then JPEG at `qf ~ U{70..100}`.
pub fn social_network_sim(img: &RgbImage, seed: u64) -> Result<(RgbImage, SocialParams)> {
    let params = sample_social(seed);
    let resized = apply_perturbation(img, &PerturbationSpec::Resize { scale: params.scale }, seed)?;
    Ok((raster::jpeg_roundtrip(&resized, params.qf)?, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let v = ((x * 37 + y * 91) ^ (x * y)) % 256;
            image::Rgb([v as u8, (255 - v) as u8, ((x * 5) % 256) as u8])
        })
    }

    #[test]
    fn identity_parameters_are_bit_exact() {
        let img = textured(64, 48);
        for spec in [
            PerturbationSpec::None,
            PerturbationSpec::Blur { sigma: 0.0 },
            PerturbationSpec::Resize { scale: 1.0 },
            PerturbationSpec::Noise { sigma: 0.0 },
            PerturbationSpec::Jitter { brightness: [0.0; 3], contrast: [0.0; 3] },
        ] {
            assert_eq!(apply_perturbation(&img, &spec, 3).unwrap(), img, "{spec:?}");
        }
        let (out, ops) = standard_aug(&img, &AugPolicy::identity(), 5).unwrap();
        assert!(ops.is_empty());
        assert_eq!(out, img);
    }

    #[test]
    fn jpeg_matches_direct_codec_pass() {
        let img = textured(64, 64);
        let ours = apply_perturbation(&img, &PerturbationSpec::Jpeg { qf: 75 }, 0).unwrap();
        let mut bytes = Vec::new();
        image::codecs::jpeg::JpegEncoder::new_with_quality(&mut bytes, 75)
            .encode_image(&img)
            .unwrap();
        let reference = image::load_from_memory(&bytes).unwrap().to_rgb8();
        assert_eq!(ours, reference);
    }

    fn max_abs_diff(a: &RgbImage, b: &RgbImage) -> u8 {
        a.as_raw().iter().zip(b.as_raw()).map(|(x, y)| x.abs_diff(*y)).max().unwrap()
    }

    #[test]
    fn jpeg_recompression_is_bounded_on_smooth_content() {
        let img = RgbImage::from_fn(64, 64, |x, y| image::Rgb([(x * 3) as u8, (y * 3) as u8, ((x + y) * 2) as u8]));
        for qf in [30, 50, 75, 90, 95] {
            let once = raster::jpeg_roundtrip(&img, qf).unwrap();
            let twice = raster::jpeg_roundtrip(&once, qf).unwrap();
            let max = max_abs_diff(&once, &twice);
            assert!(max <= 1, "qf {qf} changed a pixel by {max}");
        }
    }

    // Sharp texture does not meet the one-level bound (drift up to ~27 at low
    // qf), but repeated re-encoding converges: drift never grows.
    #[test]
    fn jpeg_recompression_drift_shrinks_on_texture() {
        let img = textured(64, 64);
        for qf in [30, 50, 75, 90, 95] {
            let once = raster::jpeg_roundtrip(&img, qf).unwrap();
            let twice = raster::jpeg_roundtrip(&once, qf).unwrap();
            let thrice = raster::jpeg_roundtrip(&twice, qf).unwrap();
            let (d12, d23) = (max_abs_diff(&once, &twice), max_abs_diff(&twice, &thrice));
            assert!(d23 <= d12, "qf {qf}: drift grew from {d12} to {d23}");
        }
    }

    #[test]
    fn resize_rounds_dimensions_and_rejects_tiny_outputs() {
        let img = textured(504, 504);
        let out = apply_perturbation(&img, &PerturbationSpec::Resize { scale: 0.7 }, 0).unwrap();
        assert_eq!(out.dimensions(), (353, 353));
        let small = textured(20, 20);
        assert!(matches!(
            apply_perturbation(&small, &PerturbationSpec::Resize { scale: 0.5 }, 0),
            Err(Error::DegenerateSize { .. })
        ));
    }

    #[test]
    fn cutout_paints_one_gray_rectangle() {
        let img = RgbImage::from_pixel(200, 200, image::Rgb([10, 20, 30]));
        let out = apply_perturbation(&img, &PerturbationSpec::Cutout { frac: 0.1 }, 4).unwrap();
        let gray: Vec<(u32, u32)> = out
            .enumerate_pixels()
            .filter(|(_, _, p)| p.0 == [MID_GRAY; 3])
            .map(|(x, y, _)| (x, y))
            .collect();
        // +-1 row/col of rounding
        assert!((gray.len() as i64 - 4000).abs() <= 2 * 200, "{}", gray.len());
        let (x0, x1) = (gray.iter().map(|p| p.0).min().unwrap(), gray.iter().map(|p| p.0).max().unwrap());
        let (y0, y1) = (gray.iter().map(|p| p.1).min().unwrap(), gray.iter().map(|p| p.1).max().unwrap());
        assert_eq!(((x1 - x0 + 1) * (y1 - y0 + 1)) as usize, gray.len());
    }

    #[test]
    fn standard_aug_rates_match_probabilities() {
        let policy = AugPolicy {
            p_blur: 0.3,
            p_jpeg: 0.6,
            ..AugPolicy::default()
        };
        let n = 10_000;
        let (mut blur, mut jpeg) = (0, 0);
        for seed in 0..n {
            for op in sample_standard(&policy, seed) {
                match op {
                    PerturbationSpec::Blur { sigma } => {
                        assert!((0.0..=3.0).contains(&sigma));
                        blur += 1;
                    }
                    PerturbationSpec::Jpeg { qf } => {
                        assert!((30..=100).contains(&qf));
                        jpeg += 1;
                    }
                    other => panic!("unexpected {other:?}"),
                }
            }
        }
        assert!((blur as f64 / n as f64 - 0.3).abs() < 0.02);
        assert!((jpeg as f64 / n as f64 - 0.6).abs() < 0.02);
    }

    #[test]
    fn standard_aug_orders_blur_before_jpeg_and_is_reproducible() {
        let policy = AugPolicy {
            p_blur: 1.0,
            p_jpeg: 1.0,
            ..AugPolicy::default()
        };
        let img = textured(32, 32);
        let (a, ops) = standard_aug(&img, &policy, 77).unwrap();
        assert_eq!(ops[0].kind(), "blur");
        assert_eq!(ops[1].kind(), "jpeg");
        let (b, ops2) = standard_aug(&img, &policy, 77).unwrap();
        assert_eq!(ops, ops2);
        assert_eq!(a, b);
        assert_eq!(a, apply_all(&img, &ops, 77).unwrap());
    }

    #[test]
    fn cutmix_examples() {
        let a = RgbImage::from_pixel(100, 100, image::Rgb([0; 3]));
        let b = RgbImage::from_pixel(100, 100, image::Rgb([255; 3]));
        let (out, w) = cutmix(&a, &b, 1.0, 0).unwrap();
        assert_eq!((out, w), (a.clone(), 1.0));
        let (out, w) = cutmix(&a, &b, 0.0, 0).unwrap();
        assert_eq!((out, w), (b.clone(), 0.0));
        let (out, w) = cutmix(&a, &b, 0.75, 9).unwrap();
        let pasted = out.pixels().filter(|p| p.0 == [255; 3]).count();
        assert!((pasted as i64 - 2500).abs() <= 100);
        assert!((w - (1.0 - pasted as f64 / 10_000.0)).abs() < 1e-12);
        assert!(cutmix(&a, &RgbImage::new(10, 10), 0.5, 0).is_err());
    }

    #[test]
    fn mixup_examples() {
        let a = RgbImage::from_pixel(8, 8, image::Rgb([100; 3]));
        let b = RgbImage::from_pixel(8, 8, image::Rgb([200; 3]));
        assert_eq!(mixup(&a, &b, 1.0).unwrap(), a);
        assert!(mixup(&a, &b, 0.5).unwrap().pixels().all(|p| p.0 == [150; 3]));
        let x = textured(32, 32);
        let y = image::imageops::rotate90(&textured(32, 32));
        let m = mixup(&x, &y, 0.3).unwrap();
        for ((p, q), r) in x.as_raw().iter().zip(y.as_raw()).zip(m.as_raw()) {
            let exact = 0.3 * f64::from(*p) + 0.7 * f64::from(*q);
            assert!((f64::from(*r) - exact).abs() <= 0.5 + 1e-9);
        }
    }

    #[test]
    fn inpaintedpp_disabled_is_identity_and_enabled_is_deterministic() {
        let img = textured(96, 80);
        let off = AugPolicy::preset(PolicyName::InpaintedPlus);
        let (out, ops) = inpaintedpp_post(&img, &off, 1).unwrap();
        assert!(ops.is_empty());
        assert_eq!(out, img);

        let on = AugPolicy {
            p_scale_crop: 1.0,
            p_cutout: 1.0,
            p_noise: 1.0,
            p_jitter: 1.0,
            crop_max: 64,
            ..AugPolicy::preset(PolicyName::InpaintedPlusPlus)
        };
        let (a, ops) = inpaintedpp_post(&img, &on, 8).unwrap();
        let kinds: Vec<&str> = ops.iter().map(PerturbationSpec::kind).collect();
        assert_eq!(kinds, ["scale_crop", "cutout", "noise", "jitter"]);
        assert_eq!(a, inpaintedpp_post(&img, &on, 8).unwrap().0);
        assert!(a.width() <= 64 && a.height() <= 64);
    }

    #[test]
    fn social_parameters_stay_in_bounds() {
        for seed in 0..10_000 {
            let p = sample_social(seed);
            assert!((0.7..=1.0).contains(&p.scale));
            assert!((70..=100).contains(&p.qf));
        }
        assert_eq!(sample_social(3), sample_social(3));
        let img = textured(64, 64);
        let (out, p) = social_network_sim(&img, 3).unwrap();
        let side = (p.scale * 64.0).round() as u32;
        assert_eq!(out.dimensions(), (side, side));
    }

    #[test]
    fn policy_presets_validate() {
        for name in [
            PolicyName::Standard,
            PolicyName::CutmixMixup,
            PolicyName::Inpainted,
            PolicyName::InpaintedPlus,
            PolicyName::InpaintedPlusPlus,
        ] {
            AugPolicy::preset(name).validate().unwrap();
        }
        let bad = AugPolicy {
            p_blur: 1.5,
            ..AugPolicy::default()
        };
        assert!(bad.validate().is_err());
        let json = r#"{"name": "inpainted_plus_plus", "p_noise": 0.3}"#;
        let p: AugPolicy = serde_json::from_str(json).unwrap();
        assert_eq!(p.name, PolicyName::InpaintedPlusPlus);
        assert_eq!(p.p_noise, 0.3);
    }
}
