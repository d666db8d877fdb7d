//! Config-driven experiment orchestration.
//!
//! Stages run in a fixed order, each writing into `<out>/<stage>/` together
//! with a `stamp.json` carrying the config hash and tool version. A stage
//! whose stamp matches the current hash is skipped.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::audit::{self, AuditThresholds};
use crate::augment::{self, AugPolicy, PerturbationSpec, PolicyName};
use crate::coco::{self, CocoLicense};
use crate::detector::{self, DetectorHandle, FeatureSpec, ImageScore, TrainSchedule};
use crate::genclient::{self, GenParams, MockConfig, MockSidecar, RunOptions, SidecarClient, Transport};
use crate::manifest::{self, DatasetManifest, ImageRecord, IngestOptions, Label, Variant};
use crate::metrics::{self, MetricsConfig, MetricsReport, ScoreEntry, ScoreSet};
use crate::rng::{derive_seed, keyed_rng};
use crate::spectral::{self, PairKind};
use crate::{Error, Result, TOOL_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    BuildDataset,
    Generate,
    Augment,
    Score,
    Evaluate,
    Robustness,
    Spectra,
    Audit,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::BuildDataset,
        Stage::Generate,
        Stage::Augment,
        Stage::Score,
        Stage::Evaluate,
        Stage::Robustness,
        Stage::Spectra,
        Stage::Audit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::BuildDataset => "build-dataset",
            Stage::Generate => "generate",
            Stage::Augment => "augment",
            Stage::Score => "score",
            Stage::Evaluate => "evaluate",
            Stage::Robustness => "robustness",
            Stage::Spectra => "spectra",
            Stage::Audit => "audit",
        }
    }

    /// Stages whose artifacts this one reads.
    fn requires(self, config: &ExperimentConfig) -> Vec<Stage> {
        let probe = config.trains_probe();
        match self {
            Stage::BuildDataset => vec![],
            Stage::Generate => vec![Stage::BuildDataset],
            Stage::Augment => vec![Stage::Generate],
            Stage::Score | Stage::Robustness if probe => vec![Stage::Generate, Stage::Augment],
            Stage::Score | Stage::Robustness => vec![Stage::Generate],
            Stage::Evaluate => vec![Stage::Score],
            Stage::Spectra | Stage::Audit => vec![Stage::Generate],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Comma-separated stage list; `all` selects every stage.
pub fn parse_stages(list: &str) -> Result<Vec<Stage>> {
    let mut out = Vec::new();
    for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if part == "all" {
            out.extend(Stage::ALL);
        } else {
            out.push(part.parse()?);
        }
    }
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(Error::Config("no stages selected".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub images_dir: PathBuf,
    pub annotations: Option<PathBuf>,
    pub min_objects: usize,
    pub source_tag: String,
    pub creative_commons_only: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            images_dir: PathBuf::from("images"),
            annotations: None,
            min_objects: 1,
            source_tag: "coco".into(),
            creative_commons_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    /// `mock` for the in-process generator, otherwise the sidecar base URL.
    pub endpoint: String,
    pub params: GenParams,
    pub max_in_flight: usize,
    pub retries: u32,
    pub mock: MockConfig,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        let run = RunOptions::default();
        GenerationConfig {
            endpoint: "mock".into(),
            params: GenParams::default(),
            max_in_flight: run.max_in_flight,
            retries: run.retries,
            mock: MockConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub policy: PolicyName,
    /// Fields of [`AugPolicy`] replacing the preset's values.
    pub overrides: Value,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            policy: PolicyName::Standard,
            overrides: Value::Object(Default::default()),
        }
    }
}

impl AugmentationConfig {
    pub fn resolve(&self, seed: u64) -> Result<AugPolicy> {
        let mut base = serde_json::to_value(AugPolicy::preset(self.policy))?;
        merge(&mut base, &self.overrides);
        let mut policy: AugPolicy =
            serde_json::from_value(base).map_err(|e| Error::Config(format!("augmentation overrides: {e}")))?;
        policy.seed = seed;
        policy.validate()?;
        Ok(policy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub schedule: TrainSchedule,
    pub bands: usize,
    pub crop_size: u32,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            schedule: TrainSchedule::default(),
            bands: spectral::DEFAULT_BANDS,
            crop_size: detector::DEFAULT_CROP,
            val_fraction: 0.2,
            test_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectraConfig {
    pub size: usize,
    pub bands: usize,
}

impl Default for SpectraConfig {
    fn default() -> Self {
        SpectraConfig {
            size: spectral::DEFAULT_SIZE,
            bands: spectral::DEFAULT_BANDS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditConfig {
    pub thresholds: AuditThresholds,
    /// Recompress fakes into `<out>/dataset_unbiased` when a compression flag is raised.
    pub rebalance: bool,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            thresholds: AuditThresholds::default(),
            rebalance: true,
        }
    }
}

pub fn default_sweep() -> Vec<PerturbationSpec> {
    let mut grid = vec![PerturbationSpec::None];
    grid.extend([90, 70, 50].map(|qf| PerturbationSpec::Jpeg { qf }));
    grid.extend([0.75, 0.5].map(|scale| PerturbationSpec::Resize { scale }));
    grid.extend([1.0, 2.0, 3.0].map(|sigma| PerturbationSpec::Blur { sigma }));
    grid
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub dataset: DatasetConfig,
    pub generation: GenerationConfig,
    pub augmentation: AugmentationConfig,
    pub training: TrainingConfig,
    /// External detector; when absent the toy probe trained by `augment` is used.
    pub detector: Option<DetectorHandle>,
    pub sweep: Vec<PerturbationSpec>,
    pub metrics: MetricsConfig,
    pub spectra: SpectraConfig,
    pub audit: AuditConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            workers: 4,
            dataset: DatasetConfig::default(),
            generation: GenerationConfig::default(),
            augmentation: AugmentationConfig::default(),
            training: TrainingConfig::default(),
            detector: None,
            sweep: default_sweep(),
            metrics: MetricsConfig::default(),
            spectra: SpectraConfig::default(),
            audit: AuditConfig::default(),
        }
    }
}

/// Recursively overlay `patch` onto `base`; non-object values replace.
fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// Apply `a.b.c=value` to a JSON tree. The value is parsed as JSON when it
/// can be, otherwise taken as a string.
pub fn apply_override(tree: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("empty path segment in `{key}`")));
        }
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            } else {
                return Err(Error::Config(format!("`{}` is not an object", parts[..i].join("."))));
            }
        }
        let map = node.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("split yields at least one segment")
}

impl ExperimentConfig {
    /// Parse a JSON config (or the defaults when `text` is `None`) and apply
    /// `--set` overrides.
    pub fn from_json(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut tree = match text {
            Some(t) => serde_json::from_str(t).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?,
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(Some(&text), overrides)?;
        // Relative dataset paths are taken relative to the config file.
        let dir = path.parent().unwrap_or(Path::new("."));
        if cfg.dataset.images_dir.is_relative() {
            cfg.dataset.images_dir = dir.join(&cfg.dataset.images_dir);
        }
        if let Some(a) = cfg.dataset.annotations.as_mut().filter(|a| a.is_relative()) {
            *a = dir.join(&*a);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.training;
        if !(0.0..1.0).contains(&t.val_fraction)
            || !(0.0..1.0).contains(&t.test_fraction)
            || t.val_fraction + t.test_fraction >= 1.0
        {
            return Err(Error::Config("val_fraction + test_fraction must lie in [0, 1)".into()));
        }
        if t.crop_size < detector::MIN_CROP {
            return Err(Error::Config(format!("training.crop_size must be at least {}", detector::MIN_CROP)));
        }
        if self.metrics.bins == 0 || !(0.0..=1.0).contains(&self.metrics.threshold) {
            return Err(Error::Config("metrics.bins must be positive and threshold in [0, 1]".into()));
        }
        if let Some(d) = &self.detector {
            d.validate()?;
        }
        for p in &self.sweep {
            p.validate().map_err(|e| Error::Config(format!("sweep: {e}")))?;
        }
        self.augmentation.resolve(self.seed)?;
        Ok(())
    }

    fn trains_probe(&self) -> bool {
        self.detector.is_none()
    }

    /// Hash of everything except the output location and worker count, which
    /// do not affect results.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Value::Object(m) = &mut v {
            m.remove("out_dir");
            m.remove("workers");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(self.seed, &[stage.name()])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    pub config_hash: String,
    pub tool_version: String,
}

const STAMP: &str = "stamp.json";
const LOCK: &str = ".alignbench.lock";

fn stage_dir(out: &Path, stage: Stage) -> PathBuf {
    out.join(stage.name())
}

fn read_stamp(out: &Path, stage: Stage) -> Option<Stamp> {
    let text = std::fs::read_to_string(stage_dir(out, stage).join(STAMP)).ok()?;
    serde_json::from_str(&text).ok()
}

fn write_stamp(out: &Path, stage: Stage, hash: &str) -> Result<()> {
    let stamp = Stamp {
        stage: stage.name().into(),
        config_hash: hash.into(),
        tool_version: TOOL_VERSION.into(),
    };
    let path = stage_dir(out, stage).join(STAMP);
    crate::raster::write_bytes(&path, serde_json::to_string_pretty(&stamp)?.as_bytes())
}

fn is_current(out: &Path, stage: Stage, hash: &str) -> bool {
    read_stamp(out, stage).is_some_and(|s| s.config_hash == hash)
}

/// Exclusive lock on an output directory, released on drop.
struct Lock(PathBuf);

impl Lock {
    fn acquire(out: &Path) -> Result<Lock> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join(LOCK);
        OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Config(format!(
                    "{} exists: another pipeline is using this output directory (delete it if that run died)",
                    path.display()
                ))
            } else {
                Error::io(&path, e)
            }
        })?;
        Ok(Lock(path))
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub config_hash: String,
    pub ran: Vec<Stage>,
    pub skipped: Vec<Stage>,
}

/// Run the selected stages in their fixed order.
pub fn run_pipeline(config: &ExperimentConfig, stages: &[Stage]) -> Result<PipelineOutcome> {
    run_pipeline_with(config, stages, None)
}

/// As [`run_pipeline`], optionally routing generation through `transport`
/// instead of the configured endpoint.
pub fn run_pipeline_with(
    config: &ExperimentConfig,
    stages: &[Stage],
    transport: Option<&dyn Transport>,
) -> Result<PipelineOutcome> {
    config.validate()?;
    let out = &config.out_dir;
    let _lock = Lock::acquire(out)?;
    let hash = config.hash();
    crate::raster::write_bytes(&out.join("config.resolved.json"), serde_json::to_string_pretty(config)?.as_bytes())?;

    let mut selected = stages.to_vec();
    selected.sort();
    selected.dedup();
    let mut outcome = PipelineOutcome {
        config_hash: hash.clone(),
        ..Default::default()
    };
    for stage in selected {
        for dep in stage.requires(config) {
            if !is_current(out, dep, &hash) {
                return Err(Error::MissingStage {
                    stage: stage.name().into(),
                    requires: dep.name().into(),
                });
            }
        }
        if is_current(out, stage, &hash) {
            log::info!("{stage}: up to date");
            outcome.skipped.push(stage);
            continue;
        }
        log::info!("{stage}: running");
        let dir = stage_dir(out, stage);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        match stage {
            Stage::BuildDataset => build_dataset(config, &dir, &hash)?,
            Stage::Generate => generate(config, out, &dir, transport, &hash)?,
            Stage::Augment => train_stage(config, out, &dir)?,
            Stage::Score => score_stage(config, out, &dir)?,
            Stage::Evaluate => evaluate_stage(config, out, &dir)?,
            Stage::Robustness => robustness_stage(config, out, &dir)?,
            Stage::Spectra => spectra_stage(config, out, &dir)?,
            Stage::Audit => audit_stage(config, out, &dir)?,
        }
        write_stamp(out, stage, &hash)?;
        outcome.ran.push(stage);
    }
    Ok(outcome)
}

fn build_dataset(config: &ExperimentConfig, dir: &Path, hash: &str) -> Result<()> {
    let d = &config.dataset;
    if !d.images_dir.is_dir() {
        return Err(Error::Config(format!("images_dir {} does not exist", d.images_dir.display())));
    }
    if let Some(a) = d.annotations.as_ref().filter(|a| !a.is_file()) {
        return Err(Error::Config(format!("annotations {} does not exist", a.display())));
    }
    let cc = |l: Option<&CocoLicense>| coco::is_creative_commons(l);
    let opts = IngestOptions {
        images_dir: d.images_dir.clone(),
        annotations: d.annotations.clone(),
        min_objects: d.min_objects,
        out_dir: dir.to_path_buf(),
        source_tag: d.source_tag.clone(),
        license_filter: if d.creative_commons_only { Some(&cc) } else { None },
    };
    let mut outcome = manifest::ingest_reals(&opts)?;
    stamp_provenance(&mut outcome.manifest, hash);
    outcome.manifest.save(dir)?;
    manifest::write_rejections(&dir.join("rejections.csv"), &outcome.rejections)?;
    log::info!(
        "build-dataset: {} reals, {} rejected",
        outcome.manifest.records.len(),
        outcome.rejections.len()
    );
    Ok(())
}

fn rebase(manifest: &mut DatasetManifest, prefix: &Path) {
    for r in manifest.records.iter_mut().filter(|r| r.path.is_relative()) {
        r.path = prefix.join(&r.path);
    }
}

fn stamp_provenance(m: &mut DatasetManifest, hash: &str) {
    m.provenance.config_hash = hash.into();
    m.provenance.tool_version = TOOL_VERSION.into();
}

fn generate(
    config: &ExperimentConfig,
    out: &Path,
    dir: &Path,
    transport: Option<&dyn Transport>,
    hash: &str,
) -> Result<()> {
    let mut m = DatasetManifest::load(&stage_dir(out, Stage::BuildDataset))?;
    rebase(&mut m, &Path::new("..").join(Stage::BuildDataset.name()));
    let g = &config.generation;
    let mut jobs = manifest::plan_fake_variants(&m, config.stage_seed(Stage::Generate), &g.params)?;

    let mock;
    #[cfg(feature = "http")]
    let http;
    let transport: &dyn Transport = match transport {
        Some(t) => t,
        None if g.endpoint == "mock" => {
            mock = MockSidecar::new(g.mock.clone());
            &mock
        }
        #[cfg(feature = "http")]
        None => {
            http = genclient::HttpTransport::new(&g.endpoint);
            &http
        }
        #[cfg(not(feature = "http"))]
        None => return Err(Error::Config("built without the `http` feature; use endpoint \"mock\"".into())),
    };
    let opts = RunOptions {
        max_in_flight: g.max_in_flight,
        retries: g.retries,
        ledger: Some(dir.join("jobs.jsonl")),
    };
    let summary = genclient::run_jobs(&mut jobs, &m, dir, &SidecarClient::new(transport), &opts)?;
    log::info!(
        "generate: {} sidecar calls, {} composites, {} skipped, {} failed",
        summary.sidecar_calls,
        summary.composites,
        summary.skipped,
        summary.failed
    );
    let fakes = genclient::generated_records(&jobs, &m);
    m.records.extend(fakes);
    stamp_provenance(&mut m, hash);
    m.save(dir)?;
    crate::raster::write_bytes(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Split keyed on pair id, so a real and its fakes always land together.
pub fn split_of(pair_id: &str, seed: u64, val_fraction: f64, test_fraction: f64) -> Split {
    let u: f64 = keyed_rng(seed, &["split", pair_id]).random();
    if u < test_fraction {
        Split::Test
    } else if u < test_fraction + val_fraction {
        Split::Val
    } else {
        Split::Train
    }
}

pub fn split_manifest(m: &DatasetManifest, seed: u64, val: f64, test: f64, which: Split) -> DatasetManifest {
    let mut out = m.clone();
    out.records.retain(|r| split_of(&r.pair_id, seed, val, test) == which);
    let keep: std::collections::HashSet<&str> = out.records.iter().map(|r| r.id.as_str()).collect();
    out.annotations.retain(|a| keep.contains(a.record_id.as_str()));
    out
}

fn generated(out: &Path) -> Result<(DatasetManifest, PathBuf)> {
    let dir = stage_dir(out, Stage::Generate);
    Ok((DatasetManifest::load(&dir)?, dir))
}

fn split(config: &ExperimentConfig, m: &DatasetManifest, which: Split) -> DatasetManifest {
    let t = &config.training;
    split_manifest(m, config.stage_seed(Stage::Augment), t.val_fraction, t.test_fraction, which)
}

fn train_stage(config: &ExperimentConfig, out: &Path, dir: &Path) -> Result<()> {
    let policy = config.augmentation.resolve(config.stage_seed(Stage::Augment))?;
    crate::raster::write_bytes(&dir.join("policy.json"), serde_json::to_string_pretty(&policy)?.as_bytes())?;
    if !config.trains_probe() {
        log::info!("augment: external detector configured, no probe trained");
        return Ok(());
    }
    let (m, base) = generated(out)?;
    let train = split(config, &m, Split::Train);
    let val = split(config, &m, Split::Val);
    let counts: BTreeMap<&str, usize> = [("train", &train), ("val", &val)]
        .into_iter()
        .map(|(k, s)| (k, s.records.len()))
        .collect();
    crate::raster::write_bytes(&dir.join("split.json"), serde_json::to_string_pretty(&counts)?.as_bytes())?;
    let spec = FeatureSpec::new(config.training.bands, config.training.crop_size);
    let mut schedule = config.training.schedule.clone();
    schedule.seed = derive_seed(config.stage_seed(Stage::Augment), &["train", &schedule.seed.to_string()]);
    let probe = detector::train_probe(&train, &base, &val, &base, &policy, &spec, &schedule)?;
    log::info!(
        "augment: probe trained for {} iterations, best val bAcc {:.4}",
        probe.training_log.iterations,
        probe
            .training_log
            .evaluations
            .iter()
            .map(|e| e.val_bacc)
            .fold(f64::NAN, f64::max)
    );
    probe.save(&dir.join("probe.json"))
}

fn detector_for(config: &ExperimentConfig, out: &Path) -> Result<(Box<dyn detector::CropScorer>, u32)> {
    match &config.detector {
        Some(h) => Ok((detector::load_detector(h)?, h.crop_size)),
        None => {
            let probe = detector::ToyProbe::load(&stage_dir(out, Stage::Augment).join("probe.json"))?;
            let crop = probe.feature_spec.crop_size;
            Ok((Box::new(probe), crop))
        }
    }
}

fn group_of(r: &ImageRecord) -> String {
    r.variant.name().to_string()
}

fn score_set(records: &[&ImageRecord], scores: &[ImageScore], threshold: f64) -> ScoreSet {
    let mut set = ScoreSet::new(
        records
            .iter()
            .zip(scores)
            .map(|(r, s)| ScoreEntry {
                id: r.id.clone(),
                group: group_of(r),
                prob: s.prob,
                label: r.label.as_u8(),
            })
            .collect(),
    );
    set.threshold = threshold;
    set
}

fn score_stage(config: &ExperimentConfig, out: &Path, dir: &Path) -> Result<()> {
    let (m, base) = generated(out)?;
    let test = split(config, &m, Split::Test);
    let (scorer, crop) = detector_for(config, out)?;
    let records: Vec<&ImageRecord> = test.records.iter().collect();
    let scores = detector::score_records(scorer.as_ref(), &records, &test, &base, crop, config.workers, |_, img| Ok(img))?;
    let set = score_set(&records, &scores, config.metrics.threshold);
    set.write_csv(&dir.join("scores.csv"))
}

/// One group per fake variant (its fakes plus every real), plus `all`.
pub fn per_generator_groups(set: &ScoreSet) -> ScoreSet {
    let reals: Vec<&ScoreEntry> = set.entries.iter().filter(|e| e.label == 0).collect();
    let mut entries: Vec<ScoreEntry> = set
        .entries
        .iter()
        .map(|e| ScoreEntry {
            group: "all".into(),
            ..e.clone()
        })
        .collect();
    let variants: Vec<String> = set.groups().into_iter().filter(|g| g != Variant::Real.name()).collect();
    for v in variants {
        entries.extend(set.entries.iter().filter(|e| e.group == v).cloned());
        entries.extend(reals.iter().map(|e| ScoreEntry {
            group: v.clone(),
            ..(*e).clone()
        }));
    }
    ScoreSet {
        entries,
        threshold: set.threshold,
        hard_labels: set.hard_labels,
    }
}

fn evaluate_stage(config: &ExperimentConfig, out: &Path, dir: &Path) -> Result<()> {
    let mut set = ScoreSet::read_csv(&stage_dir(out, Stage::Score).join("scores.csv"))?;
    set.threshold = config.metrics.threshold;
    let report = metrics::build_report(&per_generator_groups(&set), &config.metrics)?;
    report.write(dir)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub kind: String,
    pub param: f64,
    pub bacc: Option<f64>,
    pub auc: Option<f64>,
    pub ece: Option<f64>,
    pub nll: Option<f64>,
}

pub struct SweepInput<'a> {
    pub scorer: &'a dyn detector::CropScorer,
    pub crop_size: u32,
    pub manifest: &'a DatasetManifest,
    pub base: &'a Path,
    pub metrics: MetricsConfig,
    pub seed: u64,
    pub workers: usize,
}

/// Perturb every record at each grid point (seeded per record and point),
/// score and evaluate. Points where a perturbation would produce a degenerate
/// image are skipped with a warning.
pub fn robustness_sweep(input: &SweepInput<'_>, grid: &[PerturbationSpec]) -> Result<Vec<(RobustnessRow, MetricsReport)>> {
    let records: Vec<&ImageRecord> = input.manifest.records.iter().collect();
    let mut rows = Vec::new();
    for (i, spec) in grid.iter().enumerate() {
        let point = format!("{i}:{}", serde_json::to_string(spec)?);
        let scored = detector::score_records(
            input.scorer,
            &records,
            input.manifest,
            input.base,
            input.crop_size,
            input.workers,
            |r, img| augment::apply_perturbation(&img, spec, derive_seed(input.seed, &[&r.id, &point])),
        );
        let scores = match scored {
            Ok(s) => s,
            Err(Error::DegenerateSize { width, height }) => {
                log::warn!("skipping {} {}: produces {width}x{height} images", spec.kind(), spec.param());
                continue;
            }
            Err(e) => return Err(e),
        };
        let set = score_set(&records, &scores, input.metrics.threshold);
        let g = metrics::evaluate(&set, &input.metrics)?;
        let report = metrics::build_report(&per_generator_groups(&set), &input.metrics)?;
        rows.push((
            RobustnessRow {
                kind: spec.kind().into(),
                param: spec.param(),
                bacc: g.bacc,
                auc: g.auc,
                ece: g.ece,
                nll: g.nll,
            },
            report,
        ));
    }
    Ok(rows)
}

pub fn write_robustness_csv(path: &Path, rows: &[RobustnessRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn robustness_stage(config: &ExperimentConfig, out: &Path, dir: &Path) -> Result<()> {
    let (m, base) = generated(out)?;
    let test = split(config, &m, Split::Test);
    let (scorer, crop_size) = detector_for(config, out)?;
    let input = SweepInput {
        scorer: scorer.as_ref(),
        crop_size,
        manifest: &test,
        base: &base,
        metrics: config.metrics,
        seed: config.stage_seed(Stage::Robustness),
        workers: config.workers,
    };
    let results = robustness_sweep(&input, &config.sweep)?;
    let rows: Vec<RobustnessRow> = results.iter().map(|(r, _)| r.clone()).collect();
    write_robustness_csv(&dir.join("robustness.csv"), &rows)?;
    let reports: Vec<&MetricsReport> = results.iter().map(|(_, r)| r).collect();
    crate::raster::write_bytes(&dir.join("reports.json"), serde_json::to_string_pretty(&reports)?.as_bytes())
}

fn spectra_stage(config: &ExperimentConfig, out: &Path, dir: &Path) -> Result<()> {
    let (m, base) = generated(out)?;
    let min_side = m.records.iter().map(|r| r.width.min(r.height)).min().unwrap_or(0) as usize;
    let size = config.spectra.size.min(min_side) & !1;
    if size < 2 {
        return Err(Error::InvalidArgument("images are too small for a spectrum".into()));
    }
    let reals: BTreeMap<&str, &ImageRecord> = m.reals().map(|r| (r.id.as_str(), r)).collect();
    for v in Variant::FAKES {
        let mut pairs = Vec::new();
        for f in m.fakes().filter(|f| f.variant == v) {
            let Some(real) = reals.get(f.pair_id.as_str()) else { continue };
            let a = crate::raster::read_image(&m.resolve(&base, real))?;
            let b = crate::raster::read_image(&m.resolve(&base, f))?;
            if let (Some(pa), Some(pb)) = (spectral::central_luma(&a, size), spectral::central_luma(&b, size)) {
                pairs.push((pa, pb));
            }
        }
        if pairs.is_empty() {
            continue;
        }
        let kind = if v == Variant::SelfCond { PairKind::RealVsSelfcond } else { PairKind::Custom };
        let mut map = spectral::diff_power_spectrum_planes(&pairs, size, kind)?;
        map.radial_profile = spectral::radial_profile(&map, config.spectra.bands);
        spectral::emit_spectrum(&map, &dir.join(v.name()))?;
    }
    Ok(())
}

fn audit_stage(config: &ExperimentConfig, out: &Path, dir: &Path) -> Result<()> {
    let (mut m, base) = generated(out)?;
    audit::annotate_formats(&mut m, &base)?;
    let report = audit::format_bias_report(&m, &config.audit.thresholds)?;
    crate::raster::write_bytes(&dir.join("bias_report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    crate::raster::write_bytes(&dir.join("bias_report.txt"), report.table().as_bytes())?;
    if config.audit.rebalance && (report.flags.container || report.flags.jpeg_qf) {
        let target = out.join("dataset_unbiased");
        match audit::rebalance_compression(&m, &base, &target, config.stage_seed(Stage::Audit), &config.audit.thresholds) {
            Ok(rb) => {
                rb.manifest.save(&target)?;
                crate::raster::write_bytes(
                    &dir.join("bias_report_unbiased.json"),
                    serde_json::to_string_pretty(&rb.audit)?.as_bytes(),
                )?;
            }
            Err(Error::NoTargetDistribution(why)) => log::warn!("audit: not rebalancing: {why}"),
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

/// Labels of a manifest's records as metric labels.
pub fn labels(m: &DatasetManifest) -> Vec<u8> {
    m.records.iter().map(|r| Label::as_u8(r.label)).collect()
}
