//! Calibration-aware evaluation: balanced accuracy, AUC, class-balanced
//! binary ECE and balanced NLL, with grouped reports.
//!
//! Label 1 is the target (fake) class and `prob` is the predicted probability
//! of that class.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_BINS: usize = 15;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_EPSILON: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub id: String,
    pub group: String,
    pub prob: f64,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    pub entries: Vec<ScoreEntry>,
    pub threshold: f64,
    /// Detector emits hard 0/1 decisions, so calibration is undefined.
    pub hard_labels: bool,
}

impl Default for ScoreSet {
    fn default() -> Self {
        ScoreSet {
            entries: Vec::new(),
            threshold: DEFAULT_THRESHOLD,
            hard_labels: false,
        }
    }
}

impl ScoreSet {
    pub fn new(entries: Vec<ScoreEntry>) -> Self {
        ScoreSet {
            entries,
            ..Default::default()
        }
    }

    /// Entries from parallel `(prob, label)` slices, all in group `"all"`.
    pub fn from_pairs(probs: &[f64], labels: &[u8]) -> Self {
        assert_eq!(probs.len(), labels.len());
        Self::new(
            probs
                .iter()
                .zip(labels)
                .enumerate()
                .map(|(i, (&prob, &label))| ScoreEntry {
                    id: i.to_string(),
                    group: "all".into(),
                    prob,
                    label,
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if !(0.0..=1.0).contains(&e.prob) {
                return Err(Error::InvalidArgument(format!("{}: prob {} outside [0, 1]", e.id, e.prob)));
            }
            if e.label > 1 {
                return Err(Error::InvalidArgument(format!("{}: label {} is not 0/1", e.id, e.label)));
            }
        }
        Ok(())
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let n1 = self.entries.iter().filter(|e| e.label == 1).count();
        (self.entries.len() - n1, n1)
    }

    fn require_both_classes(&self) -> Result<(usize, usize)> {
        let (n0, n1) = self.class_counts();
        if n0 == 0 || n1 == 0 {
            return Err(Error::SingleClass(format!("{n0} reals, {n1} fakes")));
        }
        Ok((n0, n1))
    }

    pub fn filter_group(&self, group: &str) -> ScoreSet {
        ScoreSet {
            entries: self.entries.iter().filter(|e| e.group == group).cloned().collect(),
            threshold: self.threshold,
            hard_labels: self.hard_labels,
        }
    }

    pub fn groups(&self) -> Vec<String> {
        let mut g: Vec<String> = self.entries.iter().map(|e| e.group.clone()).collect();
        g.sort();
        g.dedup();
        g
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let entries = rdr.deserialize().collect::<std::result::Result<Vec<ScoreEntry>, _>>()?;
        let set = ScoreSet::new(entries);
        set.validate()?;
        Ok(set)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Mean of per-class accuracies with prediction `prob >= threshold`.
pub fn balanced_accuracy(scores: &ScoreSet) -> Result<f64> {
    let (n0, n1) = scores.require_both_classes()?;
    let (mut tn, mut tp) = (0usize, 0usize);
    for e in &scores.entries {
        let pred = u8::from(e.prob >= scores.threshold);
        match (e.label, pred) {
            (0, 0) => tn += 1,
            (1, 1) => tp += 1,
            _ => {}
        }
    }
    Ok(0.5 * (tn as f64 / n0 as f64 + tp as f64 / n1 as f64))
}

/// Normalised Mann-Whitney U with mid-ranks for ties.
pub fn auc(scores: &ScoreSet) -> Result<f64> {
    let (n0, n1) = scores.require_both_classes()?;
    let mut order: Vec<(f64, u8)> = scores.entries.iter().map(|e| (e.prob, e.label)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_fake = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && order[j + 1].0 == order[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum_fake += mid * order[i..=j].iter().filter(|(_, l)| *l == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_fake - (n1 * (n1 + 1)) as f64 / 2.0;
    Ok(u / (n0 as f64 * n1 as f64))
}

/// Index of the bin holding `p` for bins `((m-1)/M, m/M]`, with 0 in the first.
pub fn bin_index(p: f64, bins: usize) -> usize {
    let m = bins as f64;
    let mut idx = ((p * m).ceil() as isize - 1).clamp(0, bins as isize - 1) as usize;
    while idx > 0 && p <= idx as f64 / m {
        idx -= 1;
    }
    while idx + 1 < bins && p > (idx + 1) as f64 / m {
        idx += 1;
    }
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub lo: f64,
    pub hi: f64,
    pub count_0: usize,
    pub count_1: usize,
    /// Class-weighted mass of the bin, normalised so all bins sum to 1.
    pub mass: f64,
    pub mean_pred: f64,
    pub weighted_actual: f64,
}

/// Per-sample weight `N / (2 N_class)` so both classes carry equal total mass.
fn class_weights(scores: &ScoreSet) -> (f64, f64) {
    let (n0, n1) = scores.class_counts();
    let n = scores.entries.len() as f64;
    let w = |k: usize| if k == 0 { 0.0 } else { n / (2.0 * k as f64) };
    (w(n0), w(n1))
}

pub fn calibration_bins(scores: &ScoreSet, bins: usize) -> Result<Vec<BinStat>> {
    if bins == 0 {
        return Err(Error::InvalidArgument("ECE needs at least one bin".into()));
    }
    let (w0, w1) = class_weights(scores);
    let mut acc = vec![(0usize, 0usize, 0.0f64, 0.0f64, 0.0f64); bins];
    let mut total = 0.0;
    for e in &scores.entries {
        let w = if e.label == 1 { w1 } else { w0 };
        let slot = &mut acc[bin_index(e.prob, bins)];
        if e.label == 1 {
            slot.1 += 1;
        } else {
            slot.0 += 1;
        }
        slot.2 += w;
        slot.3 += w * e.prob;
        slot.4 += w * f64::from(e.label);
        total += w;
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .map(|(m, (c0, c1, wsum, psum, ysum))| {
            let (mean_pred, weighted_actual) = if wsum > 0.0 { (psum / wsum, ysum / wsum) } else { (0.0, 0.0) };
            BinStat {
                lo: m as f64 / bins as f64,
                hi: (m + 1) as f64 / bins as f64,
                count_0: c0,
                count_1: c1,
                mass: if total > 0.0 { wsum / total } else { 0.0 },
                mean_pred,
                weighted_actual,
            }
        })
        .collect())
}

/// Class-balanced binary ECE over `bins` equal-width bins.
pub fn binary_ece(scores: &ScoreSet, bins: usize) -> Result<f64> {
    Ok(calibration_bins(scores, bins)?
        .iter()
        .map(|b| b.mass * (b.weighted_actual - b.mean_pred).abs())
        .sum())
}

/// `-0.5 mean_reals log p(0) - 0.5 mean_fakes log p(1)`, probabilities clamped
/// to `[epsilon, 1 - epsilon]`.
pub fn balanced_nll(scores: &ScoreSet, epsilon: f64) -> Result<f64> {
    let (n0, n1) = scores.require_both_classes()?;
    let (mut s0, mut s1) = (0.0, 0.0);
    for e in &scores.entries {
        let p = e.prob.clamp(epsilon, 1.0 - epsilon);
        if e.label == 1 {
            s1 += p.ln();
        } else {
            s0 += (1.0 - p).ln();
        }
    }
    Ok(-0.5 * s0 / n0 as f64 - 0.5 * s1 / n1 as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub bins: usize,
    pub threshold: f64,
    pub epsilon: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            bins: DEFAULT_BINS,
            threshold: DEFAULT_THRESHOLD,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// Metric values; `None` marks a value that is undefined for the group.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub n_real: usize,
    pub n_fake: usize,
    pub bacc: Option<f64>,
    pub auc: Option<f64>,
    pub ece: Option<f64>,
    pub nll: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: MetricsConfig,
    pub groups: BTreeMap<String, GroupMetrics>,
    /// Macro average over the groups where each metric is defined.
    pub average: GroupMetrics,
    pub bins: BTreeMap<String, Vec<BinStat>>,
}

pub fn evaluate(scores: &ScoreSet, config: &MetricsConfig) -> Result<GroupMetrics> {
    let scores = ScoreSet {
        threshold: config.threshold,
        ..scores.clone()
    };
    let (n_real, n_fake) = scores.class_counts();
    let mut g = GroupMetrics {
        n_real,
        n_fake,
        ..Default::default()
    };
    if n_real == 0 || n_fake == 0 {
        g.notes.push(format!("single class ({n_real} real, {n_fake} fake): bAcc/AUC/NLL absent"));
    } else {
        g.bacc = Some(balanced_accuracy(&scores)?);
        g.auc = Some(auc(&scores)?);
        if !scores.hard_labels {
            g.nll = Some(balanced_nll(&scores, config.epsilon)?);
        }
    }
    if scores.hard_labels {
        g.notes.push("hard labels: calibration metrics absent".into());
    } else if !scores.entries.is_empty() {
        g.ece = Some(binary_ece(&scores, config.bins)?);
    }
    Ok(g)
}

fn macro_mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn build_report(scores: &ScoreSet, config: &MetricsConfig) -> Result<MetricsReport> {
    if scores.entries.is_empty() {
        return Err(Error::InvalidArgument("empty score set".into()));
    }
    scores.validate()?;
    let mut groups = BTreeMap::new();
    let mut bins = BTreeMap::new();
    for g in scores.groups() {
        let sub = scores.filter_group(&g);
        groups.insert(g.clone(), evaluate(&sub, config)?);
        if !scores.hard_labels {
            bins.insert(g, calibration_bins(&sub, config.bins)?);
        }
    }
    let average = GroupMetrics {
        n_real: groups.values().map(|g| g.n_real).sum(),
        n_fake: groups.values().map(|g| g.n_fake).sum(),
        bacc: macro_mean(groups.values().map(|g| g.bacc)),
        auc: macro_mean(groups.values().map(|g| g.auc)),
        ece: macro_mean(groups.values().map(|g| g.ece)),
        nll: macro_mean(groups.values().map(|g| g.nll)),
        notes: groups
            .iter()
            .filter(|(_, m)| !m.notes.is_empty())
            .map(|(k, _)| format!("group {k} has absent metrics"))
            .collect(),
    };
    Ok(MetricsReport {
        config: *config,
        groups,
        average,
        bins,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,n_real,n_fake,bacc,auc,ece,nll\n");
        let rows = self.groups.iter().map(|(k, g)| (k.as_str(), g)).chain([("AVG", &self.average)]);
        for (name, g) in rows {
            s.push_str(&format!(
                "{name},{},{},{},{},{},{}\n",
                g.n_real,
                g.n_fake,
                fmt_opt(g.bacc),
                fmt_opt(g.auc),
                fmt_opt(g.ece),
                fmt_opt(g.nll)
            ));
        }
        s
    }

    pub fn bins_csv(&self) -> String {
        let mut s = String::from("group,bin,lo,hi,count_0,count_1,mass,mean_pred,weighted_actual\n");
        for (g, bins) in &self.bins {
            for (m, b) in bins.iter().enumerate() {
                s.push_str(&format!(
                    "{g},{},{:.6},{:.6},{},{},{:.9},{:.9},{:.9}\n",
                    m + 1,
                    b.lo,
                    b.hi,
                    b.count_0,
                    b.count_1,
                    b.mass,
                    b.mean_pred,
                    b.weighted_actual
                ));
            }
        }
        s
    }

    /// Writes `report.csv`, `report.json` and `bins.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, body: &[u8]| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(p, e))
        };
        put("report.csv", self.to_csv().as_bytes())?;
        put("report.json", serde_json::to_string_pretty(self)?.as_bytes())?;
        put("bins.csv", self.bins_csv().as_bytes())
    }
}
