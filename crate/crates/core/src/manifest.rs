//! Dataset data model: real-image ingestion, fake-variant planning and
//! class-balanced batch sampling.
//!
//! A manifest is persisted as two files: `manifest.header.json` (provenance,
//! taxonomy, counts) and `manifest.jsonl` with one tagged JSON object per line
//! (`"kind": "record"` or `"kind": "annotation"`), so long generation runs can
//! append to it.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::coco::{CocoFile, CocoLicense};
use crate::genclient::{self, GenParams, GenerationJob, MaskSource, ReplacementMode};
use crate::mask::{BinaryMask, Rle};
use crate::raster::{self, Rect};
use crate::rng::keyed_rng;
use crate::{Error, Result, TOOL_VERSION};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const HEADER_FILE: &str = "manifest.header.json";
pub const REJECTIONS_FILE: &str = "rejections.csv";
const FORMAT_TAG: &str = "alignbench-manifest/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Real,
    SelfCond,
    SelfCondBg,
    InpaintSame,
    InpaintSameBg,
    InpaintDiff,
    InpaintDiffBg,
}

impl Variant {
    /// The six fake variants planned for every real image, in plan order.
    pub const FAKES: [Variant; 6] = [
        Variant::SelfCond,
        Variant::SelfCondBg,
        Variant::InpaintSame,
        Variant::InpaintSameBg,
        Variant::InpaintDiff,
        Variant::InpaintDiffBg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Real => "real",
            Variant::SelfCond => "self_cond",
            Variant::SelfCondBg => "self_cond_bg",
            Variant::InpaintSame => "inpaint_same",
            Variant::InpaintSameBg => "inpaint_same_bg",
            Variant::InpaintDiff => "inpaint_diff",
            Variant::InpaintDiffBg => "inpaint_diff_bg",
        }
    }

    pub fn is_background_restored(self) -> bool {
        matches!(self, Variant::SelfCondBg | Variant::InpaintSameBg | Variant::InpaintDiffBg)
    }

    /// Generated sibling whose output a background-restored variant composites.
    pub fn sibling(self) -> Option<Variant> {
        match self {
            Variant::SelfCondBg => Some(Variant::SelfCond),
            Variant::InpaintSameBg => Some(Variant::InpaintSame),
            Variant::InpaintDiffBg => Some(Variant::InpaintDiff),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        std::iter::once(Variant::Real)
            .chain(Variant::FAKES)
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Container {
    Jpeg,
    Png,
    Other,
}

impl Container {
    pub fn sniff(bytes: &[u8]) -> Self {
        if bytes.starts_with(&[0xff, 0xd8]) {
            Container::Jpeg
        } else if bytes.starts_with(b"\x89PNG") {
            Container::Png
        } else {
            Container::Other
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    /// Relative to the manifest directory unless absolute.
    pub path: PathBuf,
    pub label: Label,
    pub pair_id: String,
    pub variant: Variant,
    pub generator_tag: String,
    pub source_tag: String,
    pub width: u32,
    pub height: u32,
    pub container: Container,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jpeg_qf: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ImageRecord {
    pub fn real(id: impl Into<String>, path: impl Into<PathBuf>, width: u32, height: u32, source_tag: &str) -> Self {
        let id = id.into();
        ImageRecord {
            pair_id: id.clone(),
            id,
            path: path.into(),
            label: Label::Real,
            variant: Variant::Real,
            generator_tag: "none".into(),
            source_tag: source_tag.into(),
            width,
            height,
            container: Container::Png,
            jpeg_qf: None,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub record_id: String,
    pub category: String,
    pub supercategory: String,
    /// Mask in crop coordinates.
    pub mask: Rle,
    pub bbox: Rect,
}

impl ObjectAnnotation {
    pub fn decode_mask(&self) -> Result<BinaryMask> {
        BinaryMask::from_rle(&self.mask)
    }

    /// Set pixels, counted straight from the run lengths.
    pub fn area(&self) -> u64 {
        self.mask.counts.iter().skip(1).step_by(2).map(|&c| u64::from(c)).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub tool_version: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
    pub annotations: Vec<ObjectAnnotation>,
    pub taxonomy: BTreeMap<String, String>,
    pub provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    provenance: Provenance,
    taxonomy: BTreeMap<String, String>,
    records: usize,
    annotations: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Record(ImageRecord),
    Annotation(ObjectAnnotation),
}

impl DatasetManifest {
    pub fn reals(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(|r| r.label == Label::Real)
    }

    pub fn fakes(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(|r| r.label == Label::Fake)
    }

    pub fn record(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn annotations_for<'a>(&'a self, record_id: &'a str) -> impl Iterator<Item = (usize, &'a ObjectAnnotation)> + 'a {
        self.annotations.iter().enumerate().filter(move |(_, a)| a.record_id == record_id)
    }

    pub fn header_json(&self) -> String {
        let header = Header {
            format: FORMAT_TAG.into(),
            provenance: self.provenance.clone(),
            taxonomy: self.taxonomy.clone(),
            records: self.records.len(),
            annotations: self.annotations.len(),
        };
        let mut s = serde_json::to_string_pretty(&header).expect("header serialises");
        s.push('\n');
        s
    }

    pub fn records_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(&Line::Record(r.clone())).expect("record serialises"));
            out.push('\n');
        }
        for a in &self.annotations {
            out.push_str(&serde_json::to_string(&Line::Annotation(a.clone())).expect("annotation serialises"));
            out.push('\n');
        }
        out
    }

    pub fn parse(header_json: &str, jsonl: &str) -> Result<Self> {
        let header: Header = serde_json::from_str(header_json)?;
        if header.format != FORMAT_TAG {
            return Err(Error::InvalidArgument(format!("unsupported manifest format {:?}", header.format)));
        }
        let mut m = DatasetManifest {
            taxonomy: header.taxonomy,
            provenance: header.provenance,
            ..Default::default()
        };
        for (n, line) in jsonl.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(line)
                .map_err(|e| Error::InvalidArgument(format!("manifest line {}: {e}", n + 1)))?
            {
                Line::Record(r) => m.records.push(r),
                Line::Annotation(a) => m.annotations.push(a),
            }
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        raster::write_bytes(&dir.join(HEADER_FILE), self.header_json().as_bytes())?;
        raster::write_bytes(&dir.join(MANIFEST_FILE), self.records_jsonl().as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::io(p, e))
        };
        Self::parse(&read(HEADER_FILE)?, &read(MANIFEST_FILE)?)
    }

    pub fn resolve(&self, base: &Path, record: &ImageRecord) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            base.join(&record.path)
        }
    }

    /// Structural invariants that hold for every manifest.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let mut reals = HashSet::new();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate record id {}", r.id)));
            }
            if (r.label == Label::Real) != (r.variant == Variant::Real) {
                return Err(Error::InvalidArgument(format!("{}: label/variant disagree", r.id)));
            }
            if r.width == 0 || r.height == 0 {
                return Err(Error::InvalidArgument(format!("{}: zero dimension", r.id)));
            }
            if r.jpeg_qf.is_some() != (r.container == Container::Jpeg) {
                return Err(Error::InvalidArgument(format!("{}: jpeg_qf only for jpeg containers", r.id)));
            }
            if let Some(q) = r.jpeg_qf {
                if !(1..=100).contains(&q) {
                    return Err(Error::InvalidArgument(format!("{}: jpeg_qf {q} out of range", r.id)));
                }
            }
            if r.label == Label::Real {
                if r.pair_id != r.id {
                    return Err(Error::InvalidArgument(format!("{}: real must pair with itself", r.id)));
                }
                reals.insert(r.id.as_str());
            }
        }
        for r in self.fakes() {
            if !reals.contains(r.pair_id.as_str()) {
                return Err(Error::InvalidArgument(format!("{}: pair_id {} is not a real record", r.id, r.pair_id)));
            }
        }
        for a in &self.annotations {
            if !ids.contains(a.record_id.as_str()) {
                return Err(Error::InvalidArgument(format!("annotation for unknown record {}", a.record_id)));
            }
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus the six-fakes-per-real rule.
    pub fn validate_training(&self) -> Result<()> {
        self.validate()?;
        let n_real = self.reals().count();
        let n_fake = self.fakes().count();
        if n_fake != 6 * n_real {
            return Err(Error::InvalidArgument(format!("{n_fake} fakes for {n_real} reals, expected 6x")));
        }
        let mut seen = HashSet::new();
        for r in self.fakes() {
            if !seen.insert((r.pair_id.as_str(), r.variant)) {
                return Err(Error::InvalidArgument(format!("duplicate ({}, {})", r.pair_id, r.variant)));
            }
        }
        Ok(())
    }
}

/// Largest centred square: side `min(w, h)`, offsets floored.
pub fn largest_central_crop(width: u32, height: u32) -> Rect {
    let s = width.min(height);
    Rect::new((width - s) / 2, (height - s) / 2, s, s)
}

/// Object with the largest mask area; ties go to the lexicographically
/// smallest category, then to the earliest annotation.
pub fn select_editable_object<'a>(record: &ImageRecord, annotations: &'a [ObjectAnnotation]) -> Result<(usize, &'a ObjectAnnotation)> {
    pick_object(annotations.iter().enumerate().filter(|(_, a)| a.record_id == record.id))
        .ok_or_else(|| Error::NoEditableObject(record.id.clone()))
}

fn pick_object<'a>(candidates: impl Iterator<Item = (usize, &'a ObjectAnnotation)>) -> Option<(usize, &'a ObjectAnnotation)> {
    candidates.min_by(|(ia, a), (ib, b)| {
        b.area()
            .cmp(&a.area())
            .then_with(|| a.category.cmp(&b.category))
            .then_with(|| ia.cmp(ib))
    })
}

/// Six generation jobs per real record. Job seeds come from
/// [`crate::rng::derive_seed`] over `(seed, record id, variant name)`.
pub fn plan_fake_variants(manifest: &DatasetManifest, seed: u64, params: &GenParams) -> Result<Vec<GenerationJob>> {
    let mut by_record: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, a) in manifest.annotations.iter().enumerate() {
        by_record.entry(a.record_id.as_str()).or_default().push(i);
    }
    let missing: Vec<String> = manifest
        .reals()
        .filter(|r| !by_record.contains_key(r.id.as_str()))
        .map(|r| r.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingAnnotations(missing));
    }

    let mut jobs = Vec::with_capacity(6 * manifest.records.len());
    for real in manifest.reals() {
        let (annotation_index, object) =
            pick_object(by_record[real.id.as_str()].iter().map(|&i| (i, &manifest.annotations[i])))
                .ok_or_else(|| Error::NoEditableObject(real.id.clone()))?;
        for variant in Variant::FAKES {
            jobs.push(genclient::plan_job(
                real,
                variant,
                annotation_index,
                object,
                &manifest.taxonomy,
                seed,
                params,
            )?);
        }
    }
    Ok(jobs)
}

/// The non-bg sibling's mask source is what a bg composite uses.
pub fn composite_mask_source(variant: Variant) -> MaskSource {
    match variant {
        Variant::InpaintDiff | Variant::InpaintDiffBg => MaskSource::BBox,
        _ => MaskSource::Segmentation,
    }
}

pub(crate) fn replacement_mode(variant: Variant) -> Option<ReplacementMode> {
    match variant {
        Variant::InpaintSame | Variant::InpaintSameBg => Some(ReplacementMode::Same),
        Variant::InpaintDiff | Variant::InpaintDiffBg => Some(ReplacementMode::Different),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub id: String,
    pub reason: String,
}

pub fn write_rejections(path: &Path, rejections: &[Rejection]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rejections {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub struct IngestOptions<'a> {
    pub images_dir: PathBuf,
    pub annotations: Option<PathBuf>,
    pub min_objects: usize,
    /// Where cropped PNGs (`reals/<id>.png`) are written; record paths are
    /// relative to it.
    pub out_dir: PathBuf,
    pub source_tag: String,
    /// `None` accepts everything.
    pub license_filter: Option<&'a dyn Fn(Option<&CocoLicense>) -> bool>,
}

#[derive(Debug)]
pub struct IngestOutcome {
    pub manifest: DatasetManifest,
    pub rejections: Vec<Rejection>,
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Build the real-image pool: filter, centre-crop, re-encode as PNG.
pub fn ingest_reals(opts: &IngestOptions<'_>) -> Result<IngestOutcome> {
    let coco = opts.annotations.as_deref().map(CocoFile::load).transpose()?;
    if opts.min_objects >= 1 && coco.is_none() {
        return Err(Error::Annotations("min_objects >= 1 requires an annotation file".into()));
    }

    // (id, file path, license id, coco image id)
    let mut listing: Vec<(String, PathBuf, Option<u64>, Option<u64>)> = Vec::new();
    match &coco {
        Some(c) => {
            for img in &c.images {
                let path = opts.images_dir.join(&img.file_name);
                let id = Path::new(&img.file_name)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| img.id.to_string());
                listing.push((id, path, img.license, Some(img.id)));
            }
        }
        None => {
            let rd = match std::fs::read_dir(&opts.images_dir) {
                Ok(rd) => rd,
                Err(e) => return Err(Error::io(&opts.images_dir, e)),
            };
            let mut paths: Vec<PathBuf> = rd
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| is_image_file(p))
                .collect();
            paths.sort();
            for p in paths {
                let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                listing.push((id, p, None, None));
            }
        }
    }

    let mut anns_by_image: HashMap<u64, Vec<&crate::coco::CocoAnnotation>> = HashMap::new();
    let mut cats = HashMap::new();
    if let Some(c) = &coco {
        for a in &c.annotations {
            if a.iscrowd == 0 {
                anns_by_image.entry(a.image_id).or_default().push(a);
            }
        }
        for cat in &c.categories {
            cats.insert(cat.id, cat);
        }
    }

    let mut manifest = DatasetManifest {
        taxonomy: coco.as_ref().map(CocoFile::taxonomy).unwrap_or_default(),
        provenance: Provenance {
            config_hash: String::new(),
            tool_version: TOOL_VERSION.into(),
        },
        ..Default::default()
    };
    let mut rejections = Vec::new();
    let mut seen = HashSet::new();

    for (id, path, license, coco_id) in listing {
        if !seen.insert(id.clone()) {
            rejections.push(Rejection { id, reason: "duplicate_id".into() });
            continue;
        }
        if let (Some(filter), Some(c)) = (opts.license_filter, &coco) {
            if !filter(c.license(license)) {
                rejections.push(Rejection { id, reason: "license".into() });
                continue;
            }
        }
        let img = match raster::read_image(&path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping unreadable {}: {e}", path.display());
                rejections.push(Rejection { id, reason: "unreadable".into() });
                continue;
            }
        };
        let crop = largest_central_crop(img.width(), img.height());

        let mut objects = Vec::new();
        if let Some(cid) = coco_id {
            for a in anns_by_image.get(&cid).map(Vec::as_slice).unwrap_or_default() {
                let Some(cat) = cats.get(&a.category_id) else {
                    return Err(Error::Annotations(format!("annotation {} has unknown category {}", a.id, a.category_id)));
                };
                let full = a.segmentation.to_mask(img.width(), img.height())?;
                let mask = full.crop(crop);
                let pop = mask.popcount();
                if pop == 0 || pop >= crop.area() {
                    continue;
                }
                objects.push(ObjectAnnotation {
                    record_id: id.clone(),
                    category: cat.name.clone(),
                    supercategory: cat.supercategory.clone(),
                    bbox: mask.bbox().expect("nonempty mask"),
                    mask: mask.to_rle(),
                });
            }
        }
        if objects.len() < opts.min_objects {
            rejections.push(Rejection { id, reason: "no_objects".into() });
            continue;
        }

        let rel = PathBuf::from("reals").join(format!("{id}.png"));
        raster::write_bytes(&opts.out_dir.join(&rel), &raster::encode_png(&raster::crop(&img, crop)))?;
        manifest
            .records
            .push(ImageRecord::real(id, rel, crop.w, crop.h, &opts.source_tag));
        manifest.annotations.extend(objects);
    }

    Ok(IngestOutcome { manifest, rejections })
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Batch {
    /// Indices into `manifest.records`.
    pub reals: Vec<usize>,
    pub fakes: Vec<usize>,
}

impl Batch {
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.reals.iter().chain(&self.fakes).copied()
    }
}

/// One epoch of class-balanced batches.
///
/// Reals are drawn without replacement in a seeded shuffle; the epoch ends
/// once fewer than `batch_size / 2` unused reals remain. Each fake slot first
/// picks a variant uniformly, then a record of that variant.
pub struct BalancedBatches {
    reals: Vec<usize>,
    cursor: usize,
    fakes_by_variant: Vec<Vec<usize>>,
    half: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl BalancedBatches {
    pub fn new(manifest: &DatasetManifest, batch_size: usize, seed: u64, epoch: u64) -> Result<Self> {
        if batch_size == 0 || batch_size % 2 != 0 {
            return Err(Error::InvalidArgument(format!("batch_size must be even and positive, got {batch_size}")));
        }
        let mut reals = Vec::new();
        let mut by_variant: BTreeMap<Variant, Vec<usize>> = BTreeMap::new();
        for (i, r) in manifest.records.iter().enumerate() {
            match r.label {
                Label::Real => reals.push(i),
                Label::Fake => by_variant.entry(r.variant).or_default().push(i),
            }
        }
        if reals.is_empty() || by_variant.is_empty() {
            return Err(Error::SingleClass("balanced batches need both real and fake records".into()));
        }
        let mut rng = keyed_rng(seed, &["balanced_batches", &epoch.to_string()]);
        reals.shuffle(&mut rng);
        Ok(BalancedBatches {
            reals,
            cursor: 0,
            fakes_by_variant: by_variant.into_values().collect(),
            half: batch_size / 2,
            rng,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.reals.len() / self.half
    }
}

impl Iterator for BalancedBatches {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor + self.half > self.reals.len() {
            return None;
        }
        let reals = self.reals[self.cursor..self.cursor + self.half].to_vec();
        self.cursor += self.half;
        let fakes = (0..self.half)
            .map(|_| {
                let pool = self.fakes_by_variant.choose(&mut self.rng).expect("nonempty");
                *pool.choose(&mut self.rng).expect("nonempty")
            })
            .collect();
        Some(Batch { reals, fakes })
    }
}

pub fn balanced_batches(manifest: &DatasetManifest, batch_size: usize, seed: u64) -> Result<BalancedBatches> {
    BalancedBatches::new(manifest, batch_size, seed, 0)
}
