//! Detector scoring under the multi-crop contract, the spectral toy probe and
//! the early-stopping controller.

use std::collections::HashMap;
use std::path::Path;

use image::RgbImage;
use rand::Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugPolicy};
use crate::manifest::{BalancedBatches, Batch, DatasetManifest, ImageRecord, Label, Variant};
use crate::metrics::{self, ScoreSet};
use crate::raster::{self, Rect};
use crate::rng::{derive_seed, keyed_rng};
use crate::spectral;
use crate::{Error, Result};

pub const DEFAULT_CROP: u32 = 504;
pub const MIN_CROP: u32 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    ExternalOnnx,
    ExternalHttp,
    ToyProbe,
}

/// Per-channel normalisation applied to `[0, 1]` pixels before an external
/// model sees them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorHandle {
    pub kind: DetectorKind,
    #[serde(default = "default_crop")]
    pub crop_size: u32,
    pub location: String,
    #[serde(default)]
    pub normalization: Normalization,
}

fn default_crop() -> u32 {
    DEFAULT_CROP
}

impl DetectorHandle {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size < MIN_CROP {
            return Err(Error::Config(format!("crop_size {} is below {MIN_CROP}", self.crop_size)));
        }
        if self.normalization.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        Ok(())
    }
}

/// A backend producing one logit per `crop_size x crop_size` crop.
pub trait CropScorer: Send + Sync {
    fn score_crop(&self, crop: &RgbImage) -> std::result::Result<f64, String>;
}

/// Returns the same logit for every crop.
pub struct ConstantScorer(pub f64);

impl CropScorer for ConstantScorer {
    fn score_crop(&self, _crop: &RgbImage) -> std::result::Result<f64, String> {
        Ok(self.0)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn axis_offsets(dim: u32, crop: u32) -> Vec<u32> {
    if dim <= crop {
        return vec![0];
    }
    let n = dim.div_ceil(crop);
    let span = u64::from(dim - crop);
    (0..n).map(|i| (span * u64::from(i) / u64::from(n - 1)) as u32).collect()
}

/// Crop grid covering the image. Each axis gets `ceil(dim / crop)` evenly
/// spaced positions with the first at 0 and the last ending at `dim`; an axis
/// no longer than `crop` gets one position and is padded.
pub fn tile_crops(width: u32, height: u32, crop_size: u32) -> Vec<Rect> {
    let xs = axis_offsets(width, crop_size);
    let ys = axis_offsets(height, crop_size);
    ys.iter()
        .flat_map(|&y| {
            xs.iter().map(move |&x| Rect {
                x,
                y,
                w: crop_size,
                h: crop_size,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub logit: f64,
    pub prob: f64,
    pub crops: usize,
}

/// Mean of per-crop logits over [`tile_crops`]. Crops extending past the
/// image are reflect-padded.
pub fn score_image(scorer: &dyn CropScorer, img: &RgbImage, crop_size: u32) -> Result<ImageScore> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::DegenerateSize {
            width: img.width(),
            height: img.height(),
        });
    }
    let rects = tile_crops(img.width(), img.height(), crop_size);
    let mut sum = 0.0;
    for (i, r) in rects.iter().enumerate() {
        let crop = raster::crop_reflect(img, *r);
        sum += scorer
            .score_crop(&crop)
            .map_err(|reason| Error::Backend { crop_index: i, reason })?;
    }
    let logit = sum / rects.len() as f64;
    Ok(ImageScore {
        logit,
        prob: sigmoid(logit),
        crops: rects.len(),
    })
}

/// Score every record, optionally transforming each image first, with up to
/// `workers` threads. Output order follows `records`.
pub fn score_records<F>(
    scorer: &dyn CropScorer,
    records: &[&ImageRecord],
    manifest: &DatasetManifest,
    base: &Path,
    crop_size: u32,
    workers: usize,
    transform: F,
) -> Result<Vec<ImageScore>>
where
    F: Fn(&ImageRecord, RgbImage) -> Result<RgbImage> + Sync,
{
    let workers = workers.max(1).min(records.len().max(1));
    let chunk = records.len().div_ceil(workers).max(1);
    let results: Vec<Result<Vec<ImageScore>>> = std::thread::scope(|s| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|part| {
                let transform = &transform;
                s.spawn(move || {
                    part.iter()
                        .map(|r| {
                            let img = raster::read_image(&manifest.resolve(base, r))?;
                            score_image(scorer, &transform(r, img)?, crop_size)
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("scoring thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(records.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    image_png_b64: &'a str,
}

#[derive(Deserialize)]
struct ScoreResponse {
    logit: f64,
}

/// `POST /score {image_png_b64} -> {logit}` over any transport.
pub struct HttpScorer<T: crate::genclient::Transport> {
    pub transport: T,
}

impl<T: crate::genclient::Transport> CropScorer for HttpScorer<T> {
    fn score_crop(&self, crop: &RgbImage) -> std::result::Result<f64, String> {
        use base64::Engine;
        let b64 = base64::engine::general_purpose::STANDARD.encode(raster::encode_png(crop));
        let body = serde_json::to_string(&ScoreRequest { image_png_b64: &b64 }).map_err(|e| e.to_string())?;
        let reply = self.transport.post("/score", &body).map_err(|e| e.to_string())?;
        let parsed: ScoreResponse = serde_json::from_str(&reply).map_err(|e| format!("bad /score reply: {e}"))?;
        if !parsed.logit.is_finite() {
            return Err(format!("non-finite logit {}", parsed.logit));
        }
        Ok(parsed.logit)
    }
}

/// ONNX model taking `N x 3 x crop x crop` normalised float input and
/// returning `N` logits. Crops are scored one at a time (`N = 1`).
#[cfg(feature = "onnx")]
pub struct OnnxScorer {
    plan: std::sync::Arc<tract_onnx::prelude::TypedRunnableModel>,
    crop_size: u32,
    normalization: Normalization,
}

#[cfg(feature = "onnx")]
impl OnnxScorer {
    pub fn load(path: &Path, crop_size: u32, normalization: Normalization) -> Result<Self> {
        use tract_onnx::prelude::*;
        let c = crop_size as usize;
        let plan = tract_onnx::onnx()
            .model_for_path(path)
            .and_then(|m| m.with_input_fact(0, f32::fact([1, 3, c, c]).into()))
            .and_then(|m| m.into_optimized())
            .and_then(|m| m.into_runnable())
            .map_err(|e| Error::Config(format!("cannot load ONNX model {}: {e}", path.display())))?;
        Ok(OnnxScorer {
            plan,
            crop_size,
            normalization,
        })
    }
}

#[cfg(feature = "onnx")]
impl CropScorer for OnnxScorer {
    fn score_crop(&self, crop: &RgbImage) -> std::result::Result<f64, String> {
        use tract_onnx::prelude::*;
        let c = self.crop_size as usize;
        if crop.dimensions() != (self.crop_size, self.crop_size) {
            return Err(format!("crop is {:?}, model expects {c}x{c}", crop.dimensions()));
        }
        let n = self.normalization;
        let input = tract_ndarray::Array4::<f32>::from_shape_fn((1, 3, c, c), |(_, ch, y, x)| {
            let v = f64::from(crop.get_pixel(x as u32, y as u32)[ch]) / 255.0;
            ((v - n.mean[ch]) / n.std[ch]) as f32
        });
        let out = self
            .plan
            .run(tvec!(Tensor::from(input).into_tvalue()))
            .map_err(|e| e.to_string())?;
        let view = out[0].to_plain_array_view::<f32>().map_err(|e| e.to_string())?;
        view.iter().next().map(|&v| f64::from(v)).ok_or_else(|| "model returned no logits".into())
    }
}

/// Instantiate the backend a handle describes.
pub fn load_detector(handle: &DetectorHandle) -> Result<Box<dyn CropScorer>> {
    handle.validate()?;
    match handle.kind {
        DetectorKind::ToyProbe => {
            let probe = ToyProbe::load(Path::new(&handle.location))?;
            if probe.feature_spec.crop_size != handle.crop_size {
                return Err(Error::Config(format!(
                    "probe was trained on {} px crops, handle asks for {}",
                    probe.feature_spec.crop_size, handle.crop_size
                )));
            }
            Ok(Box::new(probe))
        }
        #[cfg(feature = "http")]
        DetectorKind::ExternalHttp => Ok(Box::new(HttpScorer {
            transport: crate::genclient::HttpTransport::new(&handle.location),
        })),
        #[cfg(not(feature = "http"))]
        DetectorKind::ExternalHttp => Err(Error::Config("built without the `http` feature".into())),
        #[cfg(feature = "onnx")]
        DetectorKind::ExternalOnnx => Ok(Box::new(OnnxScorer::load(
            Path::new(&handle.location),
            handle.crop_size,
            handle.normalization,
        )?)),
        #[cfg(not(feature = "onnx"))]
        DetectorKind::ExternalOnnx => Err(Error::Config("built without the `onnx` feature".into())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub bands: usize,
    pub crop_size: u32,
    /// Band edges in cycles per pixel, `bands + 1` values from 0 to 0.5.
    pub band_edges: Vec<f64>,
    /// Gaussian sigma of the low-pass removed before measuring residual variance.
    pub residual_sigma: f64,
}

impl FeatureSpec {
    pub fn new(bands: usize, crop_size: u32) -> Self {
        let bands = bands.max(1);
        FeatureSpec {
            bands,
            crop_size,
            band_edges: (0..=bands).map(|k| 0.5 * k as f64 / bands as f64).collect(),
            residual_sigma: 1.0,
        }
    }

    /// DC, one value per band, residual variance.
    pub fn dim(&self) -> usize {
        self.bands + 2
    }
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec::new(spectral::DEFAULT_BANDS, DEFAULT_CROP)
    }
}

fn square_luma(img: &RgbImage) -> (Vec<f64>, usize) {
    let side = img.width().min(img.height());
    let sq = if img.width() == img.height() {
        img.clone()
    } else {
        raster::crop(
            img,
            Rect {
                x: (img.width() - side) / 2,
                y: (img.height() - side) / 2,
                w: side,
                h: side,
            },
        )
    };
    (raster::luma(&sq), side as usize)
}

/// DC power and mean power per radial band (DC excluded from band 0) of the
/// luma plane of the central square of `img`.
pub fn radial_band_power(img: &RgbImage, bands: usize) -> (f64, Vec<f64>) {
    let (plane, s) = square_luma(img);
    let mut planner = FftPlanner::new();
    let power = spectral::fftshift(&spectral::power_spectrum(&plane, s, s, &mut planner), s);
    let dc = power[(s / 2) * s + s / 2];
    (dc, spectral::radial_bands(&power, s, bands, false))
}

/// `[log1p(DC), unit-normalised (log1p(band_1..K), residual variance)]`.
///
/// Only the non-DC part is normalised, so adding a constant to every pixel
/// changes the first entry alone.
pub fn spectral_features(img: &RgbImage, spec: &FeatureSpec) -> Vec<f64> {
    let (dc, bands) = radial_band_power(img, spec.bands);
    let (plane, s) = square_luma(img);
    let low = raster::blur_plane(&plane, s, s, spec.residual_sigma);
    let resid: Vec<f64> = plane.iter().zip(&low).map(|(a, b)| a - b).collect();
    let mean = resid.iter().sum::<f64>() / resid.len() as f64;
    let var = resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / resid.len() as f64;

    let mut ac: Vec<f64> = bands.iter().map(|b| b.ln_1p()).collect();
    ac.push(var);
    let norm = ac.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        ac.iter_mut().for_each(|v| *v /= norm);
    }
    let mut out = Vec::with_capacity(spec.dim());
    out.push(dc.ln_1p());
    out.extend(ac);
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: u64,
    pub val_bacc: f64,
    pub train_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub iterations: u64,
    pub evaluations: Vec<EvalRecord>,
    pub best_iteration: u64,
    pub stopped_early: bool,
}

/// Logistic regression over standardised spectral features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyProbe {
    pub feature_spec: FeatureSpec,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub training_log: TrainingLog,
}

impl ToyProbe {
    pub fn validate(&self) -> Result<()> {
        let d = self.feature_spec.dim();
        if self.weights.len() != d || self.feature_mean.len() != d || self.feature_scale.len() != d {
            return Err(Error::Config(format!(
                "probe has {} weights for {d} features",
                self.weights.len()
            )));
        }
        Ok(())
    }

    pub fn logit_of_features(&self, x: &[f64]) -> f64 {
        self.bias + linear(&self.weights, x, &self.feature_mean, &self.feature_scale)
    }

    pub fn logit(&self, crop: &RgbImage) -> f64 {
        self.logit_of_features(&spectral_features(crop, &self.feature_spec))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        raster::write_bytes(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let probe: ToyProbe = serde_json::from_str(&text)?;
        probe.validate()?;
        Ok(probe)
    }
}

impl CropScorer for ToyProbe {
    fn score_crop(&self, crop: &RgbImage) -> std::result::Result<f64, String> {
        Ok(self.logit(crop))
    }
}

fn linear(w: &[f64], x: &[f64], mean: &[f64], scale: &[f64]) -> f64 {
    w.iter()
        .zip(x)
        .zip(mean.iter().zip(scale))
        .map(|((w, x), (m, s))| w * (x - m) / s)
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyStopState {
    /// Starts below any attainable balanced accuracy.
    pub best_bacc: f64,
    pub evals_since_improve: u32,
    pub min_delta: f64,
    pub patience: u32,
    pub eval_interval: u64,
}

impl Default for EarlyStopState {
    fn default() -> Self {
        EarlyStopState {
            best_bacc: -1.0,
            evals_since_improve: 0,
            min_delta: 0.001,
            patience: 5,
            eval_interval: 3435,
        }
    }
}

/// Returns the updated state, whether to keep training, and whether this
/// evaluation counted as an improvement.
pub fn early_stop_step(state: EarlyStopState, new_val_bacc: f64) -> (EarlyStopState, bool, bool) {
    let mut s = state;
    let improved = new_val_bacc >= s.best_bacc + s.min_delta;
    if improved {
        s.best_bacc = new_val_bacc;
        s.evals_since_improve = 0;
    } else {
        s.evals_since_improve += 1;
    }
    (s, s.evals_since_improve < s.patience, improved)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_iterations: u64,
    pub early_stop: EarlyStopState,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            batch_size: 32,
            learning_rate: 0.01,
            max_iterations: 100_000,
            early_stop: EarlyStopState::default(),
            seed: 0,
        }
    }
}

/// One validation item: features of each crop of an image.
type ValItem = (Vec<Vec<f64>>, u8);

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

fn standardizer(rows: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len().max(1) as f64;
    let mean: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let scale = (0..dim)
        .map(|j| {
            let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 1e-24 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

fn val_bacc(probe: &ToyProbe, val: &[ValItem]) -> Result<f64> {
    let (probs, labels): (Vec<f64>, Vec<u8>) = val
        .iter()
        .map(|(crops, y)| {
            let logit = crops.iter().map(|c| probe.logit_of_features(c)).sum::<f64>() / crops.len() as f64;
            (sigmoid(logit), *y)
        })
        .unzip();
    metrics::balanced_accuracy(&ScoreSet::from_pairs(&probs, &labels))
}

/// Minibatch BCE with Adam. `sample` yields `(features, soft target)` rows
/// for a batch at a given iteration. The weights at the best evaluation are
/// kept.
fn fit(
    batches_from: &DatasetManifest,
    mut sample: impl FnMut(&Batch, u64) -> Result<Vec<(Vec<f64>, f64)>>,
    mut probe: ToyProbe,
    val: &[ValItem],
    schedule: &TrainSchedule,
) -> Result<ToyProbe> {
    let dim = probe.feature_spec.dim();
    let interval = schedule.early_stop.eval_interval.max(1);
    let mut params = vec![0.0; dim + 1];
    let mut adam = Adam::new(dim + 1);
    let mut state = schedule.early_stop;
    let mut best = (probe.weights.clone(), probe.bias);
    let mut log = TrainingLog::default();
    let mut epoch = 0u64;
    let mut batches = BalancedBatches::new(batches_from, schedule.batch_size, schedule.seed, epoch)?;
    let mut loss_acc = (0.0, 0usize);
    let mut iteration = 0u64;

    while iteration < schedule.max_iterations {
        let batch = match batches.next() {
            Some(b) => b,
            None => {
                epoch += 1;
                batches = BalancedBatches::new(batches_from, schedule.batch_size, schedule.seed, epoch)?;
                batches.next().ok_or_else(|| {
                    Error::InvalidArgument(format!("fewer than {} reals for one batch", schedule.batch_size / 2))
                })?
            }
        };
        let rows = sample(&batch, iteration)?;
        let mut grad = vec![0.0; dim + 1];
        for (x, y) in &rows {
            let z = params[dim] + linear(&params[..dim], x, &probe.feature_mean, &probe.feature_scale);
            let p = sigmoid(z);
            let err = p - y;
            for j in 0..dim {
                grad[j] += err * (x[j] - probe.feature_mean[j]) / probe.feature_scale[j];
            }
            grad[dim] += err;
            let pc = p.clamp(1e-7, 1.0 - 1e-7);
            loss_acc.0 -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
            loss_acc.1 += 1;
        }
        let n = rows.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        adam.step(&mut params, &grad, schedule.learning_rate);
        iteration += 1;

        if iteration % interval == 0 || iteration == schedule.max_iterations {
            probe.weights = params[..dim].to_vec();
            probe.bias = params[dim];
            let bacc = val_bacc(&probe, val)?;
            let (next, keep_going, improved) = early_stop_step(state, bacc);
            state = next;
            if improved {
                best = (probe.weights.clone(), probe.bias);
                log.best_iteration = iteration;
            }
            log.evaluations.push(EvalRecord {
                iteration,
                val_bacc: bacc,
                train_loss: loss_acc.0 / loss_acc.1.max(1) as f64,
            });
            loss_acc = (0.0, 0);
            if !keep_going {
                log.stopped_early = true;
                break;
            }
        }
    }
    log.iterations = iteration;
    probe.weights = best.0;
    probe.bias = best.1;
    probe.training_log = log;
    Ok(probe)
}

fn feature_manifest(labels: &[Label]) -> DatasetManifest {
    let mut m = DatasetManifest::default();
    for (i, &label) in labels.iter().enumerate() {
        let mut r = ImageRecord::real(&i.to_string(), "", 1, 1, "features");
        if label == Label::Fake {
            r.label = Label::Fake;
            r.variant = Variant::SelfCond;
        }
        m.records.push(r);
    }
    m
}

fn require_rows(rows: &[(Vec<f64>, Label)], what: &str, dim: usize) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!("{what} set is empty")));
    }
    if let Some((x, _)) = rows.iter().find(|(x, _)| x.len() != dim) {
        return Err(Error::DimensionMismatch(format!("{what} feature length {} != {dim}", x.len())));
    }
    Ok(())
}

/// Train on precomputed feature rows.
pub fn train_on_features(
    train: &[(Vec<f64>, Label)],
    val: &[(Vec<f64>, Label)],
    spec: &FeatureSpec,
    schedule: &TrainSchedule,
) -> Result<ToyProbe> {
    require_rows(train, "training", spec.dim())?;
    require_rows(val, "validation", spec.dim())?;
    let rows: Vec<Vec<f64>> = train.iter().map(|(x, _)| x.clone()).collect();
    let (feature_mean, feature_scale) = standardizer(&rows, spec.dim());
    let probe = ToyProbe {
        feature_spec: spec.clone(),
        weights: vec![0.0; spec.dim()],
        bias: 0.0,
        feature_mean,
        feature_scale,
        training_log: TrainingLog::default(),
    };
    let index = feature_manifest(&train.iter().map(|(_, l)| *l).collect::<Vec<_>>());
    let val: Vec<ValItem> = val.iter().map(|(x, l)| (vec![x.clone()], l.as_u8())).collect();
    fit(
        &index,
        |batch, _| {
            Ok(batch
                .indices()
                .map(|i| (train[i].0.clone(), f64::from(train[i].1.as_u8())))
                .collect())
        },
        probe,
        &val,
        schedule,
    )
}

fn is_stochastic(p: &AugPolicy) -> bool {
    [p.p_blur, p.p_jpeg, p.p_cutmix, p.p_mixup, p.p_scale_crop, p.p_cutout, p.p_noise, p.p_jitter]
        .iter()
        .any(|&v| v > 0.0)
}

fn central_crop(img: &RgbImage, size: u32) -> RgbImage {
    let x = img.width().saturating_sub(size) / 2;
    let y = img.height().saturating_sub(size) / 2;
    raster::crop_reflect(img, Rect { x, y, w: size, h: size })
}

fn random_crop(img: &RgbImage, size: u32, rng: &mut impl Rng) -> RgbImage {
    let x = rng.random_range(0..=img.width().saturating_sub(size));
    let y = rng.random_range(0..=img.height().saturating_sub(size));
    raster::crop_reflect(img, Rect { x, y, w: size, h: size })
}

/// Train the spectral probe on a manifest under an augmentation policy.
///
/// Fakes are restricted to the policy's training variants. Training crops are
/// random `crop_size` windows augmented per sample; validation images are
/// scored over their full crop grid. With a policy that never fires, features
/// are computed once per record and cached.
pub fn train_probe(
    train: &DatasetManifest,
    train_base: &Path,
    val: &DatasetManifest,
    val_base: &Path,
    policy: &AugPolicy,
    spec: &FeatureSpec,
    schedule: &TrainSchedule,
) -> Result<ToyProbe> {
    policy.validate()?;
    let variants = policy.training_variants();
    let mut filtered = train.clone();
    filtered.records.retain(|r| r.label == Label::Real || variants.contains(&r.variant));
    if filtered.records.is_empty() || val.records.is_empty() {
        return Err(Error::InvalidArgument("training or validation manifest is empty".into()));
    }
    let crop = spec.crop_size;

    let mut base_rows = Vec::with_capacity(filtered.records.len());
    for r in &filtered.records {
        let img = raster::read_image(&filtered.resolve(train_base, r))?;
        base_rows.push(spectral_features(&central_crop(&img, crop), spec));
    }
    let (feature_mean, feature_scale) = standardizer(&base_rows, spec.dim());

    let mut val_items = Vec::with_capacity(val.records.len());
    for r in &val.records {
        let img = raster::read_image(&val.resolve(val_base, r))?;
        let crops = tile_crops(img.width(), img.height(), crop)
            .into_iter()
            .map(|rect| spectral_features(&raster::crop_reflect(&img, rect), spec))
            .collect();
        val_items.push((crops, r.label.as_u8()));
    }

    let probe = ToyProbe {
        feature_spec: spec.clone(),
        weights: vec![0.0; spec.dim()],
        bias: 0.0,
        feature_mean,
        feature_scale,
        training_log: TrainingLog::default(),
    };

    if !is_stochastic(policy) {
        let cache: Vec<(Vec<f64>, f64)> = base_rows
            .into_iter()
            .zip(&filtered.records)
            .map(|(x, r)| (x, f64::from(r.label.as_u8())))
            .collect();
        return fit(
            &filtered,
            |batch, _| Ok(batch.indices().map(|i| cache[i].clone()).collect()),
            probe,
            &val_items,
            schedule,
        );
    }

    let mut images: HashMap<usize, RgbImage> = HashMap::new();
    let sample = |batch: &Batch, step: u64| -> Result<Vec<(Vec<f64>, f64)>> {
        let mut crops = Vec::new();
        for i in batch.indices() {
            let r = &filtered.records[i];
            if !images.contains_key(&i) {
                images.insert(i, raster::read_image(&filtered.resolve(train_base, r))?);
            }
            let seed = derive_seed(schedule.seed, &[&r.id, &step.to_string()]);
            let window = random_crop(&images[&i], crop, &mut keyed_rng(seed, &["crop"]));
            crops.push((augment::augment(&window, policy, seed)?, f64::from(r.label.as_u8())));
        }
        let mut rng = keyed_rng(schedule.seed, &["mix", &step.to_string()]);
        let n = crops.len();
        let mut rows = Vec::with_capacity(n);
        for k in 0..n {
            let (img, y) = &crops[k];
            let j = rng.random_range(0..n);
            let (other, yo) = &crops[j];
            let u: f64 = rng.random();
            let (mixed, target) = if u < policy.p_cutmix {
                let (m, wa) = augment::cutmix(img, other, rng.random(), rng.random())?;
                (m, wa * y + (1.0 - wa) * yo)
            } else if u < policy.p_cutmix + policy.p_mixup {
                let lambda: f64 = rng.random();
                (augment::mixup(img, other, lambda)?, lambda * y + (1.0 - lambda) * yo)
            } else {
                (img.clone(), *y)
            };
            rows.push((spectral_features(&mixed, spec), target));
        }
        Ok(rows)
    };
    fit(&filtered, sample, probe, &val_items, schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn noise_image(size: u32, seed: u64) -> RgbImage {
        let mut rng = keyed_rng(seed, &["noise"]);
        let n = Normal::new(128.0, 30.0).unwrap();
        RgbImage::from_fn(size, size, |_, _| {
            let v = raster::quantize(n.sample(&mut rng));
            image::Rgb([v, v, v])
        })
    }

    #[test]
    fn tiling_examples() {
        let r = |x, y| Rect { x, y, w: 504, h: 504 };
        assert_eq!(tile_crops(504, 504, 504), vec![r(0, 0)]);
        assert_eq!(tile_crops(1008, 504, 504), vec![r(0, 0), r(504, 0)]);
        assert_eq!(tile_crops(700, 700, 504), vec![r(0, 0), r(196, 0), r(0, 196), r(196, 196)]);
        assert_eq!(tile_crops(100, 40, 504), vec![r(0, 0)]);
        assert_eq!(tile_crops(1000, 300, 504), vec![r(0, 0), r(496, 0)]);
    }

    #[test]
    fn tiling_covers_every_pixel_with_pinned_endpoints() {
        for (w, h, c) in [(505, 1500, 504), (2000, 33, 32), (97, 97, 32), (64, 64, 32)] {
            let rects = tile_crops(w, h, c);
            let mut hit = vec![false; (w * h) as usize];
            for r in &rects {
                assert_eq!((r.w, r.h), (c, c));
                for y in r.y..(r.y + c).min(h) {
                    for x in r.x..(r.x + c).min(w) {
                        hit[(y * w + x) as usize] = true;
                    }
                }
            }
            assert!(hit.iter().all(|&b| b), "{w}x{h}/{c}");
            let max_x = rects.iter().map(|r| r.x + r.w).max().unwrap();
            assert_eq!(max_x, w.max(c));
        }
    }

    #[test]
    fn constant_scorer_is_size_independent() {
        for side in [10, 504, 700, 1100] {
            let s = score_image(&ConstantScorer(2.0), &RgbImage::new(side, side / 2 + 1), 504).unwrap();
            assert_eq!(s.logit, 2.0);
            assert_eq!(s.prob, sigmoid(2.0));
        }
    }

    struct FailOn(usize, std::sync::atomic::AtomicUsize);

    impl CropScorer for FailOn {
        fn score_crop(&self, _: &RgbImage) -> std::result::Result<f64, String> {
            let i = self.1.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            if i == self.0 {
                Err("boom".into())
            } else {
                Ok(0.0)
            }
        }
    }

    #[test]
    fn backend_error_carries_crop_index() {
        let err = score_image(&FailOn(2, 0.into()), &RgbImage::new(1008, 1008), 504).unwrap_err();
        assert!(matches!(err, Error::Backend { crop_index: 2, .. }), "{err:?}");
    }

    #[test]
    fn handle_rejects_tiny_crops() {
        let mut h = DetectorHandle {
            kind: DetectorKind::ToyProbe,
            crop_size: 31,
            location: String::new(),
            normalization: Normalization::default(),
        };
        assert!(h.validate().is_err());
        h.crop_size = 32;
        assert!(h.validate().is_ok());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0) < 1e-300);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn constant_image_has_only_dc() {
        let img = RgbImage::from_pixel(64, 64, image::Rgb([90, 90, 90]));
        let f = spectral_features(&img, &FeatureSpec::new(8, 64));
        assert!(f[0] > 0.0);
        assert!(f[1..].iter().all(|&v| v.abs() < 1e-9), "{f:?}");
    }

    #[test]
    fn sinusoid_lands_in_its_band() {
        let s = 64u32;
        let bands = 16;
        for u in [3u32, 10, 21, 29] {
            let img = RgbImage::from_fn(s, s, |x, _| {
                let v = 128.0 + 60.0 * (2.0 * std::f64::consts::PI * f64::from(u * x) / f64::from(s)).cos();
                let q = raster::quantize(v);
                image::Rgb([q, q, q])
            });
            let f = spectral_features(&img, &FeatureSpec::new(bands, s));
            let band_part = &f[1..=bands];
            let argmax = (0..bands).max_by(|&a, &b| band_part[a].total_cmp(&band_part[b])).unwrap();
            let expected = (f64::from(u) / f64::from(s / 2) * bands as f64) as usize;
            assert_eq!(argmax, expected.min(bands - 1), "u {u}");
        }
    }

    #[test]
    fn white_noise_profile_is_flat() {
        let bands = 16;
        let mut acc = vec![0.0; bands];
        for seed in 0..100 {
            let (_, b) = radial_band_power(&noise_image(64, seed), bands);
            acc.iter_mut().zip(&b).for_each(|(a, v)| *a += v);
        }
        let max = acc.iter().cloned().fold(f64::MIN, f64::max);
        let min = acc.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max / min < 2.0, "ratio {}", max / min);
    }

    #[test]
    fn features_ignore_constant_shift_except_dc() {
        let img = noise_image(64, 7);
        let spec = FeatureSpec::new(8, 64);
        let brighter = RgbImage::from_fn(64, 64, |x, y| {
            let p = img.get_pixel(x, y);
            image::Rgb([p[0] / 2 + 40, p[1] / 2 + 40, p[2] / 2 + 40])
        });
        let dimmer = RgbImage::from_fn(64, 64, |x, y| {
            let p = img.get_pixel(x, y);
            image::Rgb([p[0] / 2, p[1] / 2, p[2] / 2])
        });
        let a = spectral_features(&brighter, &spec);
        let b = spectral_features(&dimmer, &spec);
        assert!(a[0] > b[0]);
        for (x, y) in a[1..].iter().zip(&b[1..]) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn early_stop_examples() {
        let run = |hist: &[f64]| {
            let mut s = EarlyStopState::default();
            let mut out = Vec::new();
            for &v in hist {
                let (n, go, _) = early_stop_step(s, v);
                s = n;
                out.push((go, s.evals_since_improve));
            }
            out
        };
        let rising: Vec<f64> = (0..30).map(|i| 0.70 + 0.01 * f64::from(i)).collect();
        assert!(run(&rising).iter().all(|&(go, _)| go));

        let flat = run(&[0.80, 0.8009, 0.8, 0.7, 0.8005, 0.8009]);
        let go: Vec<bool> = flat.iter().map(|x| x.0).collect();
        assert_eq!(go, [true, true, true, true, true, false]);

        let reset = run(&[0.80, 0.79, 0.79, 0.805, 0.79]);
        let counters: Vec<u32> = reset.iter().map(|x| x.1).collect();
        assert_eq!(counters, [0, 1, 2, 0, 1]);
    }

    fn separable(n: usize, seed: u64, shuffle: bool) -> Vec<(Vec<f64>, Label)> {
        let spec = FeatureSpec::new(2, 32);
        let mut rng = keyed_rng(seed, &["rows"]);
        let noise = Normal::new(0.0, 0.3).unwrap();
        (0..n)
            .map(|i| {
                let fake = i % 2 == 1;
                let shift = if fake { 2.0 } else { -2.0 };
                let x: Vec<f64> = (0..spec.dim()).map(|_| shift + noise.sample(&mut rng)).collect();
                let label = if shuffle {
                    if rng.random::<bool>() {
                        Label::Fake
                    } else {
                        Label::Real
                    }
                } else if fake {
                    Label::Fake
                } else {
                    Label::Real
                };
                (x, label)
            })
            .collect()
    }

    fn quick_schedule() -> TrainSchedule {
        TrainSchedule {
            batch_size: 16,
            learning_rate: 0.05,
            max_iterations: 5000,
            early_stop: EarlyStopState {
                eval_interval: 20,
                ..EarlyStopState::default()
            },
            seed: 3,
        }
    }

    #[test]
    fn separable_features_reach_perfect_validation_and_stop() {
        let spec = FeatureSpec::new(2, 32);
        let p = train_on_features(&separable(200, 1, false), &separable(100, 2, false), &spec, &quick_schedule()).unwrap();
        let best = p.training_log.evaluations.iter().map(|e| e.val_bacc).fold(0.0, f64::max);
        assert_eq!(best, 1.0);
        assert!(p.training_log.stopped_early);
        assert!(p.training_log.iterations < 5000);
    }

    #[test]
    fn shuffled_labels_stay_near_chance() {
        let spec = FeatureSpec::new(2, 32);
        let p = train_on_features(&separable(400, 4, true), &separable(400, 5, true), &spec, &quick_schedule()).unwrap();
        assert!(p.training_log.stopped_early);
        for e in &p.training_log.evaluations {
            assert!((0.40..=0.60).contains(&e.val_bacc), "{}", e.val_bacc);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let spec = FeatureSpec::new(2, 32);
        let a = train_on_features(&separable(100, 1, false), &separable(50, 2, false), &spec, &quick_schedule()).unwrap();
        let b = train_on_features(&separable(100, 1, false), &separable(50, 2, false), &spec, &quick_schedule()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn probe_json_round_trip() {
        let spec = FeatureSpec::new(2, 32);
        let p = train_on_features(&separable(60, 1, false), &separable(20, 2, false), &spec, &quick_schedule()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.json");
        p.save(&path).unwrap();
        assert_eq!(ToyProbe::load(&path).unwrap(), p);
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        for key in ["feature_spec", "weights", "bias", "training_log"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let spec = FeatureSpec::new(2, 32);
        assert!(train_on_features(&[], &separable(10, 2, false), &spec, &quick_schedule()).is_err());
    }
}
