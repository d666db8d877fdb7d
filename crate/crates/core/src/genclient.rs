//! Inpainting request construction, the generation sidecar protocol and
//! background compositing.
//!
//! Wire protocol (JSON over HTTP):
//!
//! - `POST /inpaint` `{image_png_b64, mask_png_b64, prompt, seed, steps, guidance}`
//!   returns `{image_png_b64}`.
//! - `GET /health` returns `{status, model_id, mock}`.
//!
//! [`MockSidecar`] serves the same protocol in-process.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::RgbImage;
use rand::seq::IndexedRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::manifest::{self, Container, DatasetManifest, ImageRecord, Label, ObjectAnnotation, Variant};
use crate::mask::BinaryMask;
use crate::raster;
use crate::rng::{derive_seed, keyed_rng};
use crate::{Error, Result};

pub const DEFAULT_PROMPT_TEMPLATE: &str = "a photo of a {category}";

/// Sampler settings and tags shared by every job of a plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenParams {
    pub steps: u32,
    pub guidance: f64,
    pub prompt_template: String,
    pub generator_tag: String,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            steps: 50,
            guidance: 7.5,
            prompt_template: DEFAULT_PROMPT_TEMPLATE.into(),
            generator_tag: "sd21-inpaint".into(),
        }
    }
}

impl GenParams {
    pub fn prompt_for(&self, category: &str) -> String {
        self.prompt_template.replace("{category}", category)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplacementMode {
    Same,
    Different,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    Empty,
    Segmentation,
    BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InpaintRequest {
    /// PNG bytes.
    pub reference_image: Vec<u8>,
    pub mask: BinaryMask,
    pub prompt: String,
    pub seed: u64,
    pub steps: u32,
    pub guidance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireInpaintRequest {
    pub image_png_b64: String,
    pub mask_png_b64: String,
    pub prompt: String,
    pub seed: u64,
    pub steps: u32,
    pub guidance: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireInpaintResponse {
    pub image_png_b64: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default)]
    pub mock: bool,
}

impl InpaintRequest {
    pub fn validate(&self) -> Result<()> {
        let img = raster::decode_image(&self.reference_image)?;
        if (img.width(), img.height()) != (self.mask.width(), self.mask.height()) {
            return Err(Error::DimensionMismatch(format!(
                "image {}x{} vs mask {}x{}",
                img.width(),
                img.height(),
                self.mask.width(),
                self.mask.height()
            )));
        }
        if self.prompt.is_empty() && !self.mask.is_empty() {
            return Err(Error::InvalidArgument("empty prompt with a nonempty mask".into()));
        }
        if self.steps == 0 || !(self.guidance >= 0.0) {
            return Err(Error::InvalidArgument("steps must be >= 1 and guidance >= 0".into()));
        }
        Ok(())
    }

    pub fn to_wire(&self) -> WireInpaintRequest {
        WireInpaintRequest {
            image_png_b64: B64.encode(&self.reference_image),
            mask_png_b64: B64.encode(self.mask.to_png()),
            prompt: self.prompt.clone(),
            seed: self.seed,
            steps: self.steps,
            guidance: self.guidance,
        }
    }

    pub fn from_wire(wire: &WireInpaintRequest) -> Result<Self> {
        let decode = |s: &str| B64.decode(s).map_err(|e| Error::InvalidArgument(format!("base64: {e}")));
        Ok(InpaintRequest {
            reference_image: decode(&wire.image_png_b64)?,
            mask: BinaryMask::from_png(&decode(&wire.mask_png_b64)?)?,
            prompt: wire.prompt.clone(),
            seed: wire.seed,
            steps: wire.steps,
            guidance: wire.guidance,
        })
    }

    /// Serialised request body; identical requests give identical bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&self.to_wire()).expect("wire request serialises")
    }
}

/// Empty mask, empty prompt: the model regenerates the whole input.
pub fn build_self_conditioned(image: &RgbImage, seed: u64, params: &GenParams) -> InpaintRequest {
    InpaintRequest {
        reference_image: raster::encode_png(image),
        mask: BinaryMask::empty(image.width(), image.height()),
        prompt: String::new(),
        seed,
        steps: params.steps,
        guidance: params.guidance,
    }
}

/// Category that replaces `category` in an inpainting edit.
///
/// `Different` draws uniformly from the other members of the supercategory;
/// `person`, and any category alone in its supercategory, draws from every
/// other category instead.
pub fn replacement_category(
    category: &str,
    mode: ReplacementMode,
    taxonomy: &BTreeMap<String, String>,
    seed: u64,
) -> Result<String> {
    if mode == ReplacementMode::Same {
        return Ok(category.to_string());
    }
    let pool: Vec<&String> = if category == "person" {
        taxonomy.keys().filter(|c| c.as_str() != "person").collect()
    } else {
        let sup = taxonomy
            .get(category)
            .ok_or_else(|| Error::InvalidArgument(format!("category {category:?} not in taxonomy")))?;
        let siblings: Vec<&String> = taxonomy
            .iter()
            .filter(|(c, s)| *s == sup && c.as_str() != category)
            .map(|(c, _)| c)
            .collect();
        if siblings.is_empty() {
            log::info!("supercategory {sup:?} has no other member than {category:?}; drawing from all categories");
            taxonomy.keys().filter(|c| c.as_str() != category).collect()
        } else {
            siblings
        }
    };
    let mut rng = keyed_rng(seed, &["replacement_category", category]);
    pool.choose(&mut rng)
        .map(|c| (*c).clone())
        .ok_or_else(|| Error::InvalidArgument("taxonomy has no replacement candidates".into()))
}

/// Mask used for an object edit: the segmentation for same-category
/// replacement, the filled bounding box for a different category.
pub fn edit_mask(annotation: &ObjectAnnotation, source: MaskSource, width: u32, height: u32) -> Result<BinaryMask> {
    let mask = match source {
        MaskSource::Empty => BinaryMask::empty(width, height),
        MaskSource::Segmentation => annotation.decode_mask()?,
        MaskSource::BBox => {
            if annotation.bbox.w == 0 || annotation.bbox.h == 0 {
                return Err(Error::InvalidArgument(format!("degenerate bbox for {}", annotation.record_id)));
            }
            BinaryMask::from_rect(width, height, annotation.bbox)
        }
    };
    if (mask.width(), mask.height()) != (width, height) {
        return Err(Error::DimensionMismatch(format!(
            "annotation mask {}x{} vs image {width}x{height}",
            mask.width(),
            mask.height()
        )));
    }
    Ok(mask)
}

pub fn build_inpaint(
    image: &RgbImage,
    annotation: &ObjectAnnotation,
    mode: ReplacementMode,
    taxonomy: &BTreeMap<String, String>,
    seed: u64,
    params: &GenParams,
) -> Result<InpaintRequest> {
    let source = match mode {
        ReplacementMode::Same => MaskSource::Segmentation,
        ReplacementMode::Different => MaskSource::BBox,
    };
    let mask = edit_mask(annotation, source, image.width(), image.height())?;
    let category = replacement_category(&annotation.category, mode, taxonomy, seed)?;
    Ok(InpaintRequest {
        reference_image: raster::encode_png(image),
        mask,
        prompt: params.prompt_for(&category),
        seed,
        steps: params.steps,
        guidance: params.guidance,
    })
}

/// Generated pixels where the mask is set, original pixels elsewhere.
pub fn composite_background(original: &RgbImage, generated: &RgbImage, mask: &BinaryMask) -> Result<RgbImage> {
    let dims = original.dimensions();
    if generated.dimensions() != dims || (mask.width(), mask.height()) != dims {
        return Err(Error::DimensionMismatch(format!(
            "original {:?}, generated {:?}, mask {}x{}",
            dims,
            generated.dimensions(),
            mask.width(),
            mask.height()
        )));
    }
    Ok(RgbImage::from_fn(dims.0, dims.1, |x, y| {
        if mask.get(x, y) {
            *generated.get_pixel(x, y)
        } else {
            *original.get_pixel(x, y)
        }
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Pending,
    Done,
    Failed,
}

/// Everything needed to materialise an [`InpaintRequest`] once the reference
/// image is loaded. For background-restored jobs `mask` is the compositing mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobPlan {
    pub reference: PathBuf,
    pub mask: MaskSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub prompt: String,
    pub seed: u64,
    pub steps: u32,
    pub guidance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationJob {
    pub id: String,
    pub record_id: String,
    pub variant: Variant,
    pub request: JobPlan,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depends_on: Option<String>,
    pub status: JobStatus,
    /// Content-addressed, relative to the manifest directory.
    pub output_path: PathBuf,
    pub generator_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn job_id(record_id: &str, variant: Variant) -> String {
    format!("{record_id}__{variant}")
}

fn short_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Build the job for one `(real, variant)` pair; see
/// [`manifest::plan_fake_variants`].
pub fn plan_job(
    real: &ImageRecord,
    variant: Variant,
    annotation_index: usize,
    object: &ObjectAnnotation,
    taxonomy: &BTreeMap<String, String>,
    seed: u64,
    params: &GenParams,
) -> Result<GenerationJob> {
    let generated = variant.sibling().unwrap_or(variant);
    let job_seed = derive_seed(seed, &[&real.id, generated.name()]);
    let (mask, category) = match manifest::replacement_mode(generated) {
        None => (MaskSource::Empty, None),
        Some(mode) => (
            manifest::composite_mask_source(generated),
            Some(replacement_category(&object.category, mode, taxonomy, job_seed)?),
        ),
    };
    let mut plan = JobPlan {
        reference: real.path.clone(),
        mask,
        annotation_index: Some(annotation_index),
        prompt: category.as_deref().map(|c| params.prompt_for(c)).unwrap_or_default(),
        category,
        seed: job_seed,
        steps: params.steps,
        guidance: params.guidance,
    };
    let sibling_output = output_path_for(&real.id, generated, &plan, None);
    let depends_on = variant.sibling().map(|s| job_id(&real.id, s));
    let output_path = if variant.is_background_restored() {
        plan.mask = manifest::composite_mask_source(variant);
        plan.seed = derive_seed(seed, &[&real.id, variant.name()]);
        output_path_for(&real.id, variant, &plan, Some(&sibling_output))
    } else {
        sibling_output
    };
    Ok(GenerationJob {
        id: job_id(&real.id, variant),
        record_id: real.id.clone(),
        variant,
        request: plan,
        depends_on,
        status: JobStatus::Pending,
        output_path,
        generator_tag: params.generator_tag.clone(),
        error: None,
    })
}

fn output_path_for(record_id: &str, variant: Variant, plan: &JobPlan, upstream: Option<&Path>) -> PathBuf {
    let key = serde_json::to_vec(&(variant, plan, upstream)).expect("plan serialises");
    PathBuf::from("fakes")
        .join(record_id)
        .join(format!("{variant}-{}.png", short_hash(&key)))
}

/// JSON-level transport for the sidecar protocol.
pub trait Transport: Send + Sync {
    fn get(&self, path: &str) -> Result<String>;
    fn post(&self, path: &str, body: &str) -> Result<String>;
}

#[cfg(feature = "http")]
pub struct HttpTransport {
    base: String,
    agent: ureq::Agent,
}

#[cfg(feature = "http")]
impl HttpTransport {
    pub fn new(base_url: &str) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(std::time::Duration::from_secs(600)))
            .build()
            .new_agent();
        HttpTransport {
            base: base_url.trim_end_matches('/').to_string(),
            agent,
        }
    }
}

#[cfg(feature = "http")]
impl Transport for HttpTransport {
    fn get(&self, path: &str) -> Result<String> {
        self.agent
            .get(format!("{}{path}", self.base))
            .call()
            .and_then(|mut r| r.body_mut().read_to_string())
            .map_err(|e| Error::Transport(format!("GET {path}: {e}")))
    }

    fn post(&self, path: &str, body: &str) -> Result<String> {
        self.agent
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .send(body)
            .and_then(|mut r| r.body_mut().read_to_string())
            .map_err(|e| Error::Transport(format!("POST {path}: {e}")))
    }
}

pub struct SidecarClient<'a> {
    transport: &'a dyn Transport,
}

impl<'a> SidecarClient<'a> {
    pub fn new(transport: &'a dyn Transport) -> Self {
        SidecarClient { transport }
    }

    pub fn health(&self) -> Result<Health> {
        Ok(serde_json::from_str(&self.transport.get("/health")?)?)
    }

    pub fn inpaint(&self, req: &InpaintRequest) -> Result<RgbImage> {
        let body = String::from_utf8(req.to_bytes()).expect("json is utf-8");
        let resp: WireInpaintResponse = serde_json::from_str(&self.transport.post("/inpaint", &body)?)?;
        let png = B64
            .decode(resp.image_png_b64)
            .map_err(|e| Error::Transport(format!("bad base64 in response: {e}")))?;
        raster::decode_image(&png)
    }
}

/// Parameters of the deterministic stand-in generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    /// Fingerprint frequency in cycles per pixel along (x, y).
    pub fingerprint_freq: (f64, f64),
    /// 8-bit units.
    pub fingerprint_amplitude: f64,
    pub lowpass_sigma: f64,
    /// Std of the white noise that fills masked regions, before filtering.
    pub fill_noise_sigma: f64,
    pub fill_blur_sigma: f64,
    pub model_id: String,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            fingerprint_freq: (0.25, 0.125),
            fingerprint_amplitude: 3.0,
            lowpass_sigma: 0.5,
            fill_noise_sigma: 60.0,
            fill_blur_sigma: 2.0,
            model_id: "mock-fingerprint".into(),
        }
    }
}

impl MockConfig {
    pub fn fingerprint(&self, x: u32, y: u32) -> f64 {
        let (fx, fy) = self.fingerprint_freq;
        self.fingerprint_amplitude
            * (2.0 * std::f64::consts::PI * (fx * f64::from(x) + fy * f64::from(y))).cos()
    }
}

/// Deterministic generator: an empty mask regenerates the whole image as a
/// mild low-pass plus the fingerprint; otherwise masked pixels are replaced by
/// seed-keyed filtered noise around the region's mean colour plus the
/// fingerprint, and unmasked pixels are left untouched.
pub fn mock_generate(image: &RgbImage, mask: &BinaryMask, seed: u64, cfg: &MockConfig) -> Result<RgbImage> {
    let (w, h) = image.dimensions();
    if (mask.width(), mask.height()) != (w, h) {
        return Err(Error::DimensionMismatch(format!(
            "image {w}x{h} vs mask {}x{}",
            mask.width(),
            mask.height()
        )));
    }
    let (wu, hu) = (w as usize, h as usize);
    let planes = raster::to_planes(image);
    let mut out = planes.clone();
    if mask.is_empty() {
        for c in 0..3 {
            out[c] = raster::blur_plane(&planes[c], wu, hu, cfg.lowpass_sigma);
            for y in 0..h {
                for x in 0..w {
                    out[c][(y * w + x) as usize] += cfg.fingerprint(x, y);
                }
            }
        }
        return Ok(raster::from_planes(&out, w, h));
    }

    let count = mask.popcount() as f64;
    let mut rng = keyed_rng(seed, &["mock_fill"]);
    let normal = Normal::new(0.0, cfg.fill_noise_sigma.max(0.0)).expect("finite sigma");
    for c in 0..3 {
        let mut mean = 0.0;
        for y in 0..h {
            for x in 0..w {
                if mask.get(x, y) {
                    mean += planes[c][(y * w + x) as usize];
                }
            }
        }
        mean /= count;
        let noise: Vec<f64> = (0..wu * hu).map(|_| normal.sample(&mut rng)).collect();
        let noise = raster::blur_plane(&noise, wu, hu, cfg.fill_blur_sigma);
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) as usize;
                if mask.get(x, y) {
                    out[c][i] = mean + noise[i] + cfg.fingerprint(x, y);
                }
            }
        }
    }
    let generated = raster::from_planes(&out, w, h);
    // re-impose exact input pixels outside the mask
    composite_background(image, &generated, mask)
}

/// In-process implementation of the sidecar protocol around [`mock_generate`].
#[derive(Default)]
pub struct MockSidecar {
    pub config: MockConfig,
    inpaint_calls: AtomicUsize,
    health_calls: AtomicUsize,
}

impl MockSidecar {
    pub fn new(config: MockConfig) -> Self {
        MockSidecar {
            config,
            ..Default::default()
        }
    }

    pub fn inpaint_calls(&self) -> usize {
        self.inpaint_calls.load(Ordering::SeqCst)
    }

    pub fn health_calls(&self) -> usize {
        self.health_calls.load(Ordering::SeqCst)
    }

    pub fn handle_inpaint(&self, body: &str) -> Result<String> {
        let wire: WireInpaintRequest =
            serde_json::from_str(body).map_err(|e| Error::Transport(format!("400 bad request: {e}")))?;
        let req = InpaintRequest::from_wire(&wire).map_err(|e| Error::Transport(format!("400 bad request: {e}")))?;
        let image = raster::decode_image(&req.reference_image).map_err(|e| Error::Transport(format!("400 bad image: {e}")))?;
        let out = mock_generate(&image, &req.mask, req.seed, &self.config)
            .map_err(|e| Error::Transport(format!("400 {e}")))?;
        let resp = WireInpaintResponse {
            image_png_b64: B64.encode(raster::encode_png(&out)),
        };
        Ok(serde_json::to_string(&resp)?)
    }
}

impl Transport for MockSidecar {
    fn get(&self, path: &str) -> Result<String> {
        match path {
            "/health" => {
                self.health_calls.fetch_add(1, Ordering::SeqCst);
                Ok(serde_json::to_string(&Health {
                    status: "ok".into(),
                    model_id: Some(self.config.model_id.clone()),
                    mock: true,
                })?)
            }
            _ => Err(Error::Transport(format!("404 GET {path}"))),
        }
    }

    fn post(&self, path: &str, body: &str) -> Result<String> {
        match path {
            "/inpaint" => {
                self.inpaint_calls.fetch_add(1, Ordering::SeqCst);
                self.handle_inpaint(body)
            }
            _ => Err(Error::Transport(format!("404 POST {path}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub max_in_flight: usize,
    pub retries: u32,
    /// Job status lines are appended here by a single writer.
    pub ledger: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            max_in_flight: 4,
            retries: 2,
            ledger: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub sidecar_calls: usize,
    pub composites: usize,
    pub skipped: usize,
    pub failed: usize,
}

/// Request for a generated (non-bg) job, read from the manifest directory.
pub fn materialize_request(job: &GenerationJob, manifest: &DatasetManifest, base: &Path) -> Result<InpaintRequest> {
    let reference_path = if job.request.reference.is_absolute() {
        job.request.reference.clone()
    } else {
        base.join(&job.request.reference)
    };
    let image = raster::read_image(&reference_path)?;
    let mask = match (job.request.mask, job.request.annotation_index) {
        (MaskSource::Empty, _) => BinaryMask::empty(image.width(), image.height()),
        (source, Some(i)) => {
            let ann = manifest
                .annotations
                .get(i)
                .ok_or_else(|| Error::InvalidArgument(format!("{}: annotation {i} missing", job.id)))?;
            edit_mask(ann, source, image.width(), image.height())?
        }
        (_, None) => return Err(Error::InvalidArgument(format!("{}: mask needs an annotation", job.id))),
    };
    Ok(InpaintRequest {
        reference_image: raster::encode_png(&image),
        mask,
        prompt: job.request.prompt.clone(),
        seed: job.request.seed,
        steps: job.request.steps,
        guidance: job.request.guidance,
    })
}

fn generate_one(job: &GenerationJob, manifest: &DatasetManifest, base: &Path, client: &SidecarClient<'_>, retries: u32) -> (usize, Result<()>) {
    let req = match materialize_request(job, manifest, base) {
        Ok(r) => r,
        Err(e) => return (0, Err(e)),
    };
    let mut calls = 0;
    let mut last = None;
    for attempt in 0..=retries {
        calls += 1;
        match client.inpaint(&req) {
            Ok(img) => return (calls, raster::write_bytes(&base.join(&job.output_path), &raster::encode_png(&img))),
            Err(e) => {
                log::warn!("{} attempt {} failed: {e}", job.id, attempt + 1);
                last = Some(e);
            }
        }
    }
    (calls, Err(last.expect("at least one attempt")))
}

fn composite_one(job: &GenerationJob, sibling: &GenerationJob, manifest: &DatasetManifest, base: &Path) -> Result<()> {
    let original = raster::read_image(&base.join(&job.request.reference))?;
    let generated = raster::read_image(&base.join(&sibling.output_path))?;
    let ann = job
        .request
        .annotation_index
        .and_then(|i| manifest.annotations.get(i))
        .ok_or_else(|| Error::InvalidArgument(format!("{}: compositing needs an annotation", job.id)))?;
    let mask = edit_mask(ann, job.request.mask, original.width(), original.height())?;
    let out = composite_background(&original, &generated, &mask)?;
    raster::write_bytes(&base.join(&job.output_path), &raster::encode_png(&out))
}

/// Execute a job list against the sidecar.
///
/// Generated jobs run first on up to `max_in_flight` workers; background
/// restored jobs are then composited locally from their sibling's output. Jobs
/// whose content-addressed output already exists are skipped. A job that still
/// fails after `retries` retries is marked failed and the run continues.
pub fn run_jobs(
    jobs: &mut [GenerationJob],
    manifest: &DatasetManifest,
    base: &Path,
    client: &SidecarClient<'_>,
    opts: &RunOptions,
) -> Result<RunSummary> {
    let mut summary = RunSummary::default();
    if jobs.is_empty() {
        return Ok(summary);
    }

    for job in jobs.iter_mut() {
        if base.join(&job.output_path).is_file() {
            if job.status != JobStatus::Done {
                job.status = JobStatus::Done;
            }
            summary.skipped += 1;
        } else if job.status == JobStatus::Done {
            job.status = JobStatus::Pending;
        }
    }
    let pending: Vec<usize> = (0..jobs.len())
        .filter(|&i| jobs[i].status != JobStatus::Done && !jobs[i].variant.is_background_restored())
        .collect();

    if !pending.is_empty() {
        let health = client.health().map_err(|e| Error::Transport(format!("sidecar unreachable: {e}")))?;
        if health.status != "ok" {
            return Err(Error::Transport(format!("sidecar not ready: status {:?}", health.status)));
        }
    }

    let mut ledger = match &opts.ledger {
        Some(p) => Some(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?,
        ),
        None => None,
    };
    let mut record = |job: &GenerationJob| -> Result<()> {
        if let (Some(f), Some(p)) = (ledger.as_mut(), opts.ledger.as_ref()) {
            let line = serde_json::to_string(job)?;
            writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    };

    let workers = opts.max_in_flight.max(1).min(pending.len().max(1));
    let queue = Mutex::new(pending.iter().copied());
    let (tx, rx) = mpsc::channel::<(usize, usize, Result<()>)>();
    let snapshot: Vec<GenerationJob> = jobs.to_vec();
    std::thread::scope(|s| -> Result<()> {
        for _ in 0..workers {
            let tx = tx.clone();
            let queue = &queue;
            let snapshot = &snapshot;
            s.spawn(move || loop {
                let next = queue.lock().expect("queue lock").next();
                let Some(i) = next else { break };
                let (calls, res) = generate_one(&snapshot[i], manifest, base, client, opts.retries);
                if tx.send((i, calls, res)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, calls, res) in rx {
            summary.sidecar_calls += calls;
            let job = &mut jobs[i];
            match res {
                Ok(()) => {
                    job.status = JobStatus::Done;
                    job.error = None;
                }
                Err(e) => {
                    job.status = JobStatus::Failed;
                    job.error = Some(e.to_string());
                    summary.failed += 1;
                }
            }
            record(job)?;
        }
        Ok(())
    })?;

    let index: HashMap<String, usize> = jobs.iter().enumerate().map(|(i, j)| (j.id.clone(), i)).collect();
    for i in 0..jobs.len() {
        if jobs[i].status == JobStatus::Done || !jobs[i].variant.is_background_restored() {
            continue;
        }
        let dep = jobs[i].depends_on.clone().unwrap_or_default();
        let res = match index.get(&dep).map(|&d| &jobs[d]) {
            Some(sibling) if sibling.status == JobStatus::Done => composite_one(&jobs[i], sibling, manifest, base),
            Some(_) => Err(Error::InvalidArgument(format!("dependency {dep} did not complete"))),
            None => Err(Error::InvalidArgument(format!("dependency {dep} not in job list"))),
        };
        let job = &mut jobs[i];
        match res {
            Ok(()) => {
                job.status = JobStatus::Done;
                job.error = None;
                summary.composites += 1;
            }
            Err(e) => {
                job.status = JobStatus::Failed;
                job.error = Some(e.to_string());
                summary.failed += 1;
            }
        }
        record(job)?;
    }
    Ok(summary)
}

/// Fake records for every completed job, paired with their real source.
pub fn generated_records(jobs: &[GenerationJob], manifest: &DatasetManifest) -> Vec<ImageRecord> {
    jobs.iter()
        .filter(|j| j.status == JobStatus::Done)
        .filter_map(|j| {
            let real = manifest.record(&j.record_id)?;
            Some(ImageRecord {
                id: j.id.clone(),
                path: j.output_path.clone(),
                label: Label::Fake,
                pair_id: real.id.clone(),
                variant: j.variant,
                generator_tag: j.generator_tag.clone(),
                source_tag: real.source_tag.clone(),
                width: real.width,
                height: real.height,
                container: Container::Png,
                jpeg_qf: None,
                seed: Some(j.request.seed),
            })
        })
        .collect()
}
