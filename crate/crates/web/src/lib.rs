//! Browser demo over `alignbench-core`.
//!
//! Three operations, each a plain function (tested natively) with a thin
//! `wasm_bindgen` wrapper:
//! - [`fingerprint_spectrum`]: mean real-minus-fake power spectrum for mock
//!   generator settings.
//! - [`reliability`]: reliability diagram, ECE and friends for synthetic
//!   detector scores.
//! - [`perturb`]: one perturbation applied to a synthetic scene.

use image::RgbImage;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

use alignbench_core::augment::{apply_perturbation, PerturbationSpec};
use alignbench_core::detector::sigmoid;
use alignbench_core::genclient::{mock_generate, MockConfig};
use alignbench_core::mask::BinaryMask;
use alignbench_core::metrics::{self, BinStat, ScoreSet};
use alignbench_core::rng::keyed_rng;
use alignbench_core::spectral::{self, PairKind};
use alignbench_core::synth::{scene, SceneStyle};

#[derive(Clone, Debug, Serialize)]
pub struct SpectrumView {
    pub size: usize,
    /// Log-power heat map, row-major, DC-centred.
    pub heat: Vec<u8>,
    pub radial: Vec<f64>,
    /// Strongest non-DC bin as (row, col) offsets from the centre.
    pub peak: (i64, i64),
    pub peak_share: f64,
}

/// Average spectrum of `real - mock(real)` over `pairs` scenes.
pub fn fingerprint_spectrum(seed: u64, pairs: usize, size: usize, cfg: &MockConfig) -> Result<SpectrumView, String> {
    let side = u32::try_from(size).map_err(|e| e.to_string())?;
    let style = SceneStyle {
        blur_sigma: 0.6,
        ..SceneStyle::default()
    };
    let mut images: Vec<(RgbImage, RgbImage)> = Vec::with_capacity(pairs);
    for i in 0..pairs.max(1) as u64 {
        let real = scene(side, side, seed.wrapping_add(i), &style);
        let fake = mock_generate(&real, &BinaryMask::empty(side, side), i, cfg).map_err(|e| e.to_string())?;
        images.push((real, fake));
    }
    let map = spectral::diff_power_spectrum(&images, size, PairKind::RealVsSelfcond).map_err(|e| e.to_string())?;
    let c = size / 2;
    let (mut best, mut at) = (-1.0, (0, 0));
    for r in 0..size {
        for col in 0..size {
            let v = map.at(r, col);
            if (r, col) != (c, c) && v > best {
                best = v;
                at = (r as i64 - c as i64, col as i64 - c as i64);
            }
        }
    }
    let dc = map.at(c, c);
    let ac = map.total() - dc;
    Ok(SpectrumView {
        size,
        heat: spectral::heatmap(&map).into_raw(),
        radial: map.radial_profile.clone(),
        peak: at,
        peak_share: if ac > 0.0 { 2.0 * best / ac } else { 0.0 },
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ReliabilityView {
    pub bins: Vec<BinStat>,
    pub ece: f64,
    pub nll: f64,
    pub bacc: f64,
    pub auc: f64,
}

/// Synthetic detector: class-conditional logits `N(+-separation, 1)`, then
/// `p = sigmoid((logit + shift) / temperature)`. `fake_fraction` sets the
/// class balance.
pub fn reliability(
    seed: u64,
    n: usize,
    separation: f64,
    temperature: f64,
    shift: f64,
    fake_fraction: f64,
    bins: usize,
) -> Result<ReliabilityView, String> {
    if n < 2 || bins == 0 || temperature <= 0.0 || !(0.0..=1.0).contains(&fake_fraction) {
        return Err("need n >= 2, bins >= 1, temperature > 0 and fake_fraction in [0, 1]".into());
    }
    let mut rng = keyed_rng(seed, &["reliability"]);
    let unit = Normal::new(0.0, 1.0).map_err(|e| e.to_string())?;
    let mut probs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        // Always keep one sample of each class.
        let y = match i {
            0 => 1,
            1 => 0,
            _ => u8::from(rng.random_bool(fake_fraction)),
        };
        let mu = if y == 1 { separation } else { -separation };
        let logit = mu + unit.sample(&mut rng);
        probs.push(sigmoid((logit + shift) / temperature));
        labels.push(y);
    }
    let set = ScoreSet::from_pairs(&probs, &labels);
    let cfg = metrics::MetricsConfig::default();
    Ok(ReliabilityView {
        bins: metrics::calibration_bins(&set, bins).map_err(|e| e.to_string())?,
        ece: metrics::binary_ece(&set, bins).map_err(|e| e.to_string())?,
        nll: metrics::balanced_nll(&set, cfg.epsilon).map_err(|e| e.to_string())?,
        bacc: metrics::balanced_accuracy(&set).map_err(|e| e.to_string())?,
        auc: metrics::auc(&set).map_err(|e| e.to_string())?,
    })
}

#[derive(Clone, Debug)]
pub struct Preview {
    pub original: RgbImage,
    pub perturbed: RgbImage,
    /// Mean absolute pixel change, 8-bit units; `None` when sizes differ.
    pub mean_abs_diff: Option<f64>,
}

pub fn perturb(seed: u64, size: u32, spec: &PerturbationSpec) -> Result<Preview, String> {
    spec.validate().map_err(|e| e.to_string())?;
    let original = scene(size, size, seed, &SceneStyle::default());
    let perturbed = apply_perturbation(&original, spec, seed).map_err(|e| e.to_string())?;
    let mean_abs_diff = (original.dimensions() == perturbed.dimensions()).then(|| {
        let total: f64 = original
            .as_raw()
            .iter()
            .zip(perturbed.as_raw())
            .map(|(&a, &b)| f64::from(a.abs_diff(b)))
            .sum();
        total / original.as_raw().len() as f64
    });
    Ok(Preview {
        original,
        perturbed,
        mean_abs_diff,
    })
}

fn rgba(img: &RgbImage) -> Vec<u8> {
    img.pixels().flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

fn js_err(e: String) -> JsValue {
    JsValue::from_str(&e)
}

/// Returns JSON: `{size, heat, radial, peak, peak_share}`.
#[wasm_bindgen(js_name = fingerprintSpectrum)]
pub fn fingerprint_spectrum_js(
    seed: u32,
    pairs: u32,
    size: u32,
    freq_x: f64,
    freq_y: f64,
    amplitude: f64,
    lowpass_sigma: f64,
) -> Result<String, JsValue> {
    let cfg = MockConfig {
        fingerprint_freq: (freq_x, freq_y),
        fingerprint_amplitude: amplitude,
        lowpass_sigma,
        ..MockConfig::default()
    };
    let view = fingerprint_spectrum(u64::from(seed), pairs as usize, size as usize, &cfg).map_err(js_err)?;
    serde_json::to_string(&view).map_err(|e| js_err(e.to_string()))
}

/// Returns JSON: `{bins, ece, nll, bacc, auc}`.
#[wasm_bindgen(js_name = reliability)]
pub fn reliability_js(
    seed: u32,
    n: u32,
    separation: f64,
    temperature: f64,
    shift: f64,
    fake_fraction: f64,
    bins: u32,
) -> Result<String, JsValue> {
    let view = reliability(u64::from(seed), n as usize, separation, temperature, shift, fake_fraction, bins as usize)
        .map_err(js_err)?;
    serde_json::to_string(&view).map_err(|e| js_err(e.to_string()))
}

#[wasm_bindgen]
pub struct PreviewImages {
    inner: Preview,
}

#[wasm_bindgen]
impl PreviewImages {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> u32 {
        self.inner.perturbed.width()
    }
    #[wasm_bindgen(getter)]
    pub fn height(&self) -> u32 {
        self.inner.perturbed.height()
    }
    #[wasm_bindgen(getter, js_name = originalSize)]
    pub fn original_size(&self) -> u32 {
        self.inner.original.width()
    }
    /// NaN when the perturbation changed the image size.
    #[wasm_bindgen(getter, js_name = meanAbsDiff)]
    pub fn mean_abs_diff(&self) -> f64 {
        self.inner.mean_abs_diff.unwrap_or(f64::NAN)
    }
    pub fn original(&self) -> Vec<u8> {
        rgba(&self.inner.original)
    }
    pub fn perturbed(&self) -> Vec<u8> {
        rgba(&self.inner.perturbed)
    }
}

/// `spec_json` is a perturbation spec such as `{"kind": "blur", "sigma": 2}`.
#[wasm_bindgen(js_name = perturb)]
pub fn perturb_js(seed: u32, size: u32, spec_json: &str) -> Result<PreviewImages, JsValue> {
    let spec: PerturbationSpec = serde_json::from_str(spec_json).map_err(|e| js_err(e.to_string()))?;
    perturb(u64::from(seed), size, &spec).map(|inner| PreviewImages { inner }).map_err(js_err)
}
