//! Format-bias auditing: container, JPEG quality and resolution divergence
//! between classes, and recompression of fakes to match the reals' quality
//! distribution.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::manifest::{Container, DatasetManifest, ImageRecord, Label};
use crate::raster;
use crate::rng::keyed_rng;
use crate::{Error, Result};

/// Zigzag scan position -> natural (row-major) index.
const ZIGZAG: [usize; 64] = [
    0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5, 12, 19, 26, 33, 40, 48, 41, 34, 27, 20, 13, 6, 7, 14, 21,
    28, 35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51, 58, 59, 52, 45, 38, 31, 39, 46, 53, 60, 61,
    54, 47, 55, 62, 63,
];

/// Annex K luminance table, natural order.
const STD_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55, 14, 13, 16, 24, 40, 57, 69, 56, 14, 17, 22, 29,
    51, 87, 80, 62, 18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104, 113, 92, 49, 64, 78, 87, 103, 121, 120,
    101, 72, 92, 95, 98, 112, 100, 103, 99,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QfEstimate {
    Lossless,
    Jpeg(u8),
}

/// Luminance table the IJG quality scaling produces for `qf`.
pub fn scaled_luma_table(qf: u8) -> [u16; 64] {
    let q = u32::from(qf.clamp(1, 100));
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    STD_LUMA.map(|v| ((u32::from(v) * scale + 50) / 100).clamp(1, 255) as u16)
}

/// Luminance (table id 0) quantisation table in natural order.
pub fn read_luma_qtable(bytes: &[u8]) -> std::result::Result<Option<[u16; 64]>, String> {
    if !bytes.starts_with(&[0xff, 0xd8]) {
        return Err("missing SOI marker".into());
    }
    let mut p = 2;
    while p + 4 <= bytes.len() {
        if bytes[p] != 0xff {
            return Err(format!("expected marker at offset {p}"));
        }
        let marker = bytes[p + 1];
        if marker == 0xff {
            p += 1;
            continue;
        }
        if marker == 0xd9 || marker == 0xda {
            break;
        }
        if (0xd0..=0xd7).contains(&marker) || marker == 0x01 {
            p += 2;
            continue;
        }
        let len = usize::from(u16::from_be_bytes([bytes[p + 2], bytes[p + 3]]));
        if len < 2 || p + 2 + len > bytes.len() {
            return Err(format!("segment 0x{marker:02x} overruns the file"));
        }
        if marker == 0xdb {
            let seg = &bytes[p + 4..p + 2 + len];
            let mut q = 0;
            while q < seg.len() {
                let precision = seg[q] >> 4;
                let id = seg[q] & 0x0f;
                let width = if precision == 0 { 1 } else { 2 };
                if q + 1 + 64 * width > seg.len() {
                    return Err("truncated DQT segment".into());
                }
                let mut table = [0u16; 64];
                for (k, &natural) in ZIGZAG.iter().enumerate() {
                    let at = q + 1 + k * width;
                    table[natural] = if width == 1 {
                        u16::from(seg[at])
                    } else {
                        u16::from_be_bytes([seg[at], seg[at + 1]])
                    };
                }
                if id == 0 {
                    return Ok(Some(table));
                }
                q += 1 + 64 * width;
            }
        }
        p += 2 + len;
    }
    Ok(None)
}

/// Quality whose standard-scaled luminance table is nearest (L1) to `table`;
/// ties resolve to the higher quality.
pub fn nearest_quality(table: &[u16; 64]) -> u8 {
    (1..=100u8)
        .rev()
        .min_by_key(|&q| {
            scaled_luma_table(q)
                .iter()
                .zip(table)
                .map(|(a, b)| u32::from(a.abs_diff(*b)))
                .sum::<u32>()
        })
        .expect("nonempty range")
}

pub fn estimate_jpeg_qf(bytes: &[u8], id: &str) -> Result<QfEstimate> {
    match Container::sniff(bytes) {
        Container::Jpeg => {
            let table = read_luma_qtable(bytes)
                .map_err(|reason| Error::CorruptFile { id: id.into(), reason })?
                .ok_or_else(|| Error::CorruptFile {
                    id: id.into(),
                    reason: "no luminance quantisation table".into(),
                })?;
            Ok(QfEstimate::Jpeg(nearest_quality(&table)))
        }
        Container::Png => Ok(QfEstimate::Lossless),
        Container::Other => match image::guess_format(bytes) {
            Ok(_) => Ok(QfEstimate::Lossless),
            Err(e) => Err(Error::CorruptFile {
                id: id.into(),
                reason: e.to_string(),
            }),
        },
    }
}

/// Fill `container` and `jpeg_qf` of every record from its file bytes.
pub fn annotate_formats(manifest: &mut DatasetManifest, base: &Path) -> Result<()> {
    let paths: Vec<PathBuf> = manifest.records.iter().map(|r| manifest.resolve(base, r)).collect();
    for (r, path) in manifest.records.iter_mut().zip(paths) {
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        r.container = Container::sniff(&bytes);
        r.jpeg_qf = match estimate_jpeg_qf(&bytes, &r.id)? {
            QfEstimate::Jpeg(q) => Some(q),
            QfEstimate::Lossless => None,
        };
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditThresholds {
    pub ks: f64,
    pub container_mass: f64,
    pub resolution_spike: f64,
}

impl Default for AuditThresholds {
    fn default() -> Self {
        AuditThresholds {
            ks: 0.25,
            container_mass: 0.25,
            resolution_spike: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassHistograms {
    pub count: usize,
    pub container: BTreeMap<String, usize>,
    /// Key `"lossless"` or the quality factor.
    pub jpeg_qf: BTreeMap<String, usize>,
    /// Keyed by min(width, height).
    pub resolution: BTreeMap<u32, usize>,
    /// Keyed by `"WxH"`.
    pub exact_resolution: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BiasFlags {
    pub container: bool,
    pub jpeg_qf: bool,
    pub resolution: bool,
    pub resolution_spike: bool,
}

impl BiasFlags {
    pub fn any(&self) -> bool {
        self.container || self.jpeg_qf || self.resolution || self.resolution_spike
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub real: ClassHistograms,
    pub fake: ClassHistograms,
    /// Total-variation distance of the container distributions (equals the
    /// KS distance for a two-valued attribute).
    pub ks_container: f64,
    pub ks_jpeg_qf: f64,
    pub ks_resolution: f64,
    pub flags: BiasFlags,
    pub thresholds: AuditThresholds,
}

/// Lossless files sort above every JPEG quality.
fn qf_value(r: &ImageRecord) -> f64 {
    r.jpeg_qf.map(f64::from).unwrap_or(101.0)
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

fn total_variation<K: Ord + Clone>(a: &BTreeMap<K, usize>, na: usize, b: &BTreeMap<K, usize>, nb: usize) -> f64 {
    let keys: BTreeSet<&K> = a.keys().chain(b.keys()).collect();
    0.5 * keys
        .into_iter()
        .map(|k| {
            let pa = *a.get(k).unwrap_or(&0) as f64 / na as f64;
            let pb = *b.get(k).unwrap_or(&0) as f64 / nb as f64;
            (pa - pb).abs()
        })
        .sum::<f64>()
}

fn histograms<'a>(records: impl Iterator<Item = &'a ImageRecord>) -> ClassHistograms {
    let mut h = ClassHistograms::default();
    for r in records {
        h.count += 1;
        let container = serde_json::to_value(r.container).expect("enum serialises");
        *h.container.entry(container.as_str().unwrap_or("other").to_string()).or_default() += 1;
        let qf = r.jpeg_qf.map(|q| q.to_string()).unwrap_or_else(|| "lossless".into());
        *h.jpeg_qf.entry(qf).or_default() += 1;
        *h.resolution.entry(r.width.min(r.height)).or_default() += 1;
        *h.exact_resolution.entry(format!("{}x{}", r.width, r.height)).or_default() += 1;
    }
    h
}

fn spike(this: &ClassHistograms, other: &ClassHistograms, threshold: f64) -> bool {
    this.exact_resolution
        .iter()
        .any(|(res, &n)| n as f64 > threshold * this.count as f64 && !other.exact_resolution.contains_key(res))
}

pub fn format_bias_report(manifest: &DatasetManifest, thresholds: &AuditThresholds) -> Result<BiasReport> {
    let reals: Vec<&ImageRecord> = manifest.reals().collect();
    let fakes: Vec<&ImageRecord> = manifest.fakes().collect();
    if reals.is_empty() || fakes.is_empty() {
        return Err(Error::SingleClass(format!("{} reals, {} fakes", reals.len(), fakes.len())));
    }
    let real = histograms(reals.iter().copied());
    let fake = histograms(fakes.iter().copied());
    let ks_container = total_variation(&real.container, real.count, &fake.container, fake.count);
    let ks_jpeg_qf = ks_distance(
        &reals.iter().map(|r| qf_value(r)).collect::<Vec<_>>(),
        &fakes.iter().map(|r| qf_value(r)).collect::<Vec<_>>(),
    );
    let ks_resolution = ks_distance(
        &reals.iter().map(|r| f64::from(r.width.min(r.height))).collect::<Vec<_>>(),
        &fakes.iter().map(|r| f64::from(r.width.min(r.height))).collect::<Vec<_>>(),
    );
    let flags = BiasFlags {
        container: ks_container > thresholds.container_mass,
        jpeg_qf: ks_jpeg_qf > thresholds.ks,
        resolution: ks_resolution > thresholds.ks,
        resolution_spike: spike(&real, &fake, thresholds.resolution_spike)
            || spike(&fake, &real, thresholds.resolution_spike),
    };
    Ok(BiasReport {
        real,
        fake,
        ks_container,
        ks_jpeg_qf,
        ks_resolution,
        flags,
        thresholds: *thresholds,
    })
}

impl BiasReport {
    pub fn table(&self) -> String {
        let flag = |b: bool| if b { "FLAG" } else { "ok" };
        let mut s = String::new();
        s.push_str(&format!("{:<18} {:>10} {:>10}  {}\n", "attribute", "distance", "threshold", "verdict"));
        s.push_str(&format!(
            "{:<18} {:>10.4} {:>10.4}  {}\n",
            "container",
            self.ks_container,
            self.thresholds.container_mass,
            flag(self.flags.container)
        ));
        s.push_str(&format!(
            "{:<18} {:>10.4} {:>10.4}  {}\n",
            "jpeg_qf",
            self.ks_jpeg_qf,
            self.thresholds.ks,
            flag(self.flags.jpeg_qf)
        ));
        s.push_str(&format!(
            "{:<18} {:>10.4} {:>10.4}  {}\n",
            "resolution(min)",
            self.ks_resolution,
            self.thresholds.ks,
            flag(self.flags.resolution)
        ));
        s.push_str(&format!(
            "{:<18} {:>10} {:>10.4}  {}\n",
            "resolution spike",
            "-",
            self.thresholds.resolution_spike,
            flag(self.flags.resolution_spike)
        ));
        s.push_str(&format!("reals: {}  fakes: {}\n", self.real.count, self.fake.count));
        s
    }
}

#[derive(Debug)]
pub struct Rebalanced {
    pub manifest: DatasetManifest,
    pub audit: BiasReport,
}

/// Re-encode every fake as JPEG at a quality drawn (keyed by seed and record
/// id) from the empirical quality distribution of the JPEG reals. Real records
/// are kept as they are, with paths pointing at the original files.
pub fn rebalance_compression(
    manifest: &DatasetManifest,
    base: &Path,
    out_dir: &Path,
    seed: u64,
    thresholds: &AuditThresholds,
) -> Result<Rebalanced> {
    let target: Vec<u8> = manifest.reals().filter_map(|r| r.jpeg_qf).collect();
    if target.is_empty() {
        return Err(Error::NoTargetDistribution("every real image is lossless".into()));
    }
    let mut out = manifest.clone();
    for r in out.records.iter_mut() {
        let src = if r.path.is_absolute() { r.path.clone() } else { base.join(&r.path) };
        match r.label {
            Label::Real => r.path = std::path::absolute(&src).map_err(|e| Error::io(&src, e))?,
            Label::Fake => {
                let qf = *target
                    .choose(&mut keyed_rng(seed, &["rebalance", &r.id]))
                    .expect("nonempty target");
                let img = raster::read_image(&src)?;
                let rel = PathBuf::from("fakes").join(format!("{}.jpg", r.id));
                raster::write_bytes(&out_dir.join(&rel), &raster::encode_jpeg(&img, qf))?;
                r.path = rel;
                r.container = Container::Jpeg;
                r.jpeg_qf = Some(qf);
            }
        }
    }
    let audit = format_bias_report(&out, thresholds)?;
    if audit.flags.jpeg_qf {
        log::warn!("jpeg quality still diverges after rebalancing (KS {:.3})", audit.ks_jpeg_qf);
    }
    Ok(Rebalanced { manifest: out, audit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::Variant;

    fn rec(id: &str, label: Label, qf: Option<u8>, side: u32) -> ImageRecord {
        let mut r = ImageRecord::real(id, format!("{id}.png"), side, side, "t");
        if label == Label::Fake {
            r.label = Label::Fake;
            r.variant = Variant::SelfCond;
            r.pair_id = "r0".into();
        }
        r.container = if qf.is_some() { Container::Jpeg } else { Container::Png };
        r.jpeg_qf = qf;
        r
    }

    #[test]
    fn standard_tables_are_distinct_above_fifty() {
        for q in 50..100u8 {
            assert_ne!(scaled_luma_table(q), scaled_luma_table(q + 1), "q {q}");
        }
        assert_eq!(scaled_luma_table(50), STD_LUMA);
    }

    #[test]
    fn nearest_quality_recovers_exact_tables() {
        for q in 1..=100u8 {
            let est = nearest_quality(&scaled_luma_table(q));
            assert!((i16::from(est) - i16::from(q)).abs() <= 1, "{q} -> {est}");
        }
    }

    #[test]
    fn png_is_lossless_and_garbage_is_corrupt() {
        let png = raster::encode_png(&image::RgbImage::new(4, 4));
        assert_eq!(estimate_jpeg_qf(&png, "p").unwrap(), QfEstimate::Lossless);
        assert!(matches!(estimate_jpeg_qf(b"hello", "g"), Err(Error::CorruptFile { .. })));
        assert!(matches!(estimate_jpeg_qf(&[0xff, 0xd8, 0xff, 0xdb, 0xff, 0xff], "j"), Err(Error::CorruptFile { .. })));
    }

    #[test]
    fn ks_examples() {
        assert_eq!(ks_distance(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(ks_distance(&[1.0, 1.0], &[5.0]), 1.0);
        assert!((ks_distance(&[1.0, 2.0, 3.0, 4.0], &[3.0, 4.0, 5.0, 6.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn disjoint_formats_are_flagged() {
        let mut m = DatasetManifest::default();
        for i in 0..10 {
            m.records.push(rec(&format!("r{i}"), Label::Real, Some(85), 256));
            m.records.push(rec(&format!("f{i}"), Label::Fake, None, 256));
        }
        let rep = format_bias_report(&m, &AuditThresholds::default()).unwrap();
        assert_eq!(rep.ks_container, 1.0);
        assert_eq!(rep.ks_jpeg_qf, 1.0);
        assert!(rep.flags.container && rep.flags.jpeg_qf);
        assert!(!rep.flags.resolution && !rep.flags.resolution_spike);
        assert_eq!(rep.real.count, 10);
        assert_eq!(rep.real.jpeg_qf["85"], 10);
    }

    #[test]
    fn identical_distributions_raise_nothing() {
        let mut m = DatasetManifest::default();
        for i in 0..6 {
            let qf = Some(80 + i as u8);
            m.records.push(rec(&format!("r{i}"), Label::Real, qf, 200 + i));
            m.records.push(rec(&format!("f{i}"), Label::Fake, qf, 200 + i));
        }
        let rep = format_bias_report(&m, &AuditThresholds::default()).unwrap();
        assert_eq!((rep.ks_container, rep.ks_jpeg_qf, rep.ks_resolution), (0.0, 0.0, 0.0));
        assert!(!rep.flags.any());
    }

    #[test]
    fn resolution_spike_is_detected() {
        let mut m = DatasetManifest::default();
        for i in 0..10 {
            m.records.push(rec(&format!("r{i}"), Label::Real, None, 256));
            m.records.push(rec(&format!("f{i}"), Label::Fake, None, 250 + i as u32 % 3 * 10));
        }
        let rep = format_bias_report(&m, &AuditThresholds::default()).unwrap();
        assert!(rep.flags.resolution_spike);
    }

    #[test]
    fn single_class_is_an_error() {
        let mut m = DatasetManifest::default();
        m.records.push(rec("r0", Label::Real, None, 10));
        assert!(format_bias_report(&m, &AuditThresholds::default()).is_err());
    }

    #[test]
    fn report_is_symmetric_in_class_labels() {
        let mut m = DatasetManifest::default();
        for i in 0..12u8 {
            m.records.push(rec(&format!("r{i}"), Label::Real, Some(70 + i), 200 + u32::from(i) * 3));
            m.records.push(rec(&format!("f{i}"), Label::Fake, if i % 3 == 0 { None } else { Some(90 + i / 2) }, 220));
        }
        let a = format_bias_report(&m, &AuditThresholds::default()).unwrap();
        let mut swapped = m.clone();
        for r in swapped.records.iter_mut() {
            r.label = if r.label == Label::Real { Label::Fake } else { Label::Real };
        }
        let b = format_bias_report(&swapped, &AuditThresholds::default()).unwrap();
        assert_eq!(a.ks_container, b.ks_container);
        assert_eq!(a.ks_jpeg_qf, b.ks_jpeg_qf);
        assert_eq!(a.ks_resolution, b.ks_resolution);
    }
}
