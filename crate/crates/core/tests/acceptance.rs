//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Every expected value comes from an oracle written here,
//! independent of the library code under test.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use alignbench_core::audit::{self, AuditThresholds};
use alignbench_core::augment::{self, AugPolicy, PerturbationSpec};
use alignbench_core::detector::{
    self, early_stop_step, ConstantScorer, CropScorer, EarlyStopState, FeatureSpec, ToyProbe, TrainSchedule,
    TrainingLog,
};
use alignbench_core::genclient::{composite_background, mock_generate, GenParams, MockConfig};
use alignbench_core::manifest::{
    plan_fake_variants, Container, DatasetManifest, ImageRecord, Label, ObjectAnnotation, Variant,
};
use alignbench_core::mask::BinaryMask;
use alignbench_core::metrics::{self, ScoreSet};
use alignbench_core::pipeline::{robustness_sweep, SweepInput};
use alignbench_core::raster::{self, Rect};
use alignbench_core::spectral::{self, PairKind};
use alignbench_core::synth::{scene, SceneStyle};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(t: Duration, limit: Duration) -> Result<(), String> {
    check(t < limit, format!("took {t:?}, limit {limit:?}"))
}

// ---------------------------------------------------------------- metrics

fn oracle_bacc(p: &[f64], y: &[u8], thr: f64) -> f64 {
    let (mut tn, mut n0, mut tp, mut n1) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &y) in p.iter().zip(y) {
        if y == 1 {
            n1 += 1.0;
            if p >= thr {
                tp += 1.0;
            }
        } else {
            n0 += 1.0;
            if p < thr {
                tn += 1.0;
            }
        }
    }
    0.5 * (tn / n0 + tp / n1)
}

fn oracle_auc(p: &[f64], y: &[u8]) -> f64 {
    let pos: Vec<f64> = p.iter().zip(y).filter(|(_, &y)| y == 1).map(|(&p, _)| p).collect();
    let neg: Vec<f64> = p.iter().zip(y).filter(|(_, &y)| y == 0).map(|(&p, _)| p).collect();
    let mut s = 0.0;
    for &a in &pos {
        for &b in &neg {
            s += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (pos.len() as f64 * neg.len() as f64)
}

/// Bins are ((m-1)/M, m/M]; p = 0 belongs to the first. Every sample weighs
/// N / (2 N_class).
fn oracle_ece(p: &[f64], y: &[u8], m_bins: usize) -> f64 {
    let n = p.len() as f64;
    let n1 = y.iter().filter(|&&v| v == 1).count() as f64;
    let n0 = n - n1;
    let w = |y: u8| if y == 1 { n / (2.0 * n1) } else { n / (2.0 * n0) };
    let total: f64 = y.iter().map(|&v| w(v)).sum();
    let mut ece = 0.0;
    for m in 1..=m_bins {
        let lo = (m - 1) as f64 / m_bins as f64;
        let hi = m as f64 / m_bins as f64;
        let (mut wsum, mut wy, mut wp) = (0.0, 0.0, 0.0);
        for (&pi, &yi) in p.iter().zip(y) {
            let inside = (pi > lo && pi <= hi) || (m == 1 && pi == 0.0);
            if inside {
                wsum += w(yi);
                wy += w(yi) * f64::from(yi);
                wp += w(yi) * pi;
            }
        }
        if wsum > 0.0 {
            ece += wsum / total * (wy / wsum - wp / wsum).abs();
        }
    }
    ece
}

fn oracle_nll(p: &[f64], y: &[u8], eps: f64) -> f64 {
    let (mut s0, mut c0, mut s1, mut c1) = (0.0, 0.0, 0.0, 0.0);
    for (&pi, &yi) in p.iter().zip(y) {
        let q = pi.clamp(eps, 1.0 - eps);
        if yi == 1 {
            s1 -= q.ln();
            c1 += 1.0;
        } else {
            s0 -= (1.0 - q).ln();
            c0 += 1.0;
        }
    }
    0.5 * (s0 / c0 + s1 / c1)
}

fn random_set(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let n = rng.random_range(2..=2000usize);
    let frac = rng.random_range(0.05..0.95);
    let style = rng.random_range(0..4);
    let mut y: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(frac))).collect();
    y[0] = 0;
    y[1] = 1;
    let p = (0..n)
        .map(|i| match style {
            // Coarse grid: many ties and exact bin edges.
            0 => f64::from(rng.random_range(0..=30u32)) / 30.0,
            1 => f64::from(rng.random_range(0..=15u32)) / 15.0,
            2 => (rng.random_range(0.0..1.0f64) + 0.3 * f64::from(y[i])).min(1.0),
            _ => rng.random_range(0.0..=1.0),
        })
        .collect();
    (p, y)
}

fn metric_oracle_suite() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = metrics::MetricsConfig::default();
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let (p, y) = random_set(&mut rng);
        let set = ScoreSet::from_pairs(&p, &y);
        let pairs = [
            (metrics::balanced_accuracy(&set).unwrap(), oracle_bacc(&p, &y, 0.5), "bAcc"),
            (metrics::auc(&set).unwrap(), oracle_auc(&p, &y), "AUC"),
            (metrics::binary_ece(&set, 15).unwrap(), oracle_ece(&p, &y, 15), "ECE"),
            (metrics::balanced_nll(&set, cfg.epsilon).unwrap(), oracle_nll(&p, &y, cfg.epsilon), "NLL"),
        ];
        for (got, want, name) in pairs {
            let d = (got - want).abs();
            worst = worst.max(d);
            check(d <= 1e-12, format!("trial {trial} {name}: {got} vs oracle {want}"))?;
        }
    }
    let elapsed = t0.elapsed();

    let hand = ScoreSet::from_pairs(&[0.6; 10], &[0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
    let ece = metrics::binary_ece(&hand, 15).unwrap();
    check((ece - 0.1).abs() <= 1e-12, format!("hand ECE {ece} != 0.1"))?;
    let half = ScoreSet::from_pairs(&[0.5; 4], &[0, 1, 0, 1]);
    let nll = metrics::balanced_nll(&half, cfg.epsilon).unwrap();
    check((nll - std::f64::consts::LN_2).abs() <= 1e-12, format!("hand NLL {nll} != ln 2"))?;
    within(elapsed, Duration::from_secs(30))?;
    Ok(format!("1000 sets, max |diff| {worst:.1e}, hand ECE 0.1 and NLL ln2 exact, {elapsed:.2?}"))
}

// --------------------------------------------------------------- manifest

fn annotated_reals(n: usize) -> DatasetManifest {
    let mut m = DatasetManifest::default();
    for (cat, sup) in [("cat", "animal"), ("dog", "animal"), ("car", "vehicle"), ("bus", "vehicle"), ("person", "person")] {
        m.taxonomy.insert(cat.into(), sup.into());
    }
    let cats = ["cat", "dog", "car", "bus", "person"];
    let mask = BinaryMask::from_rect(64, 64, Rect::new(8, 8, 20, 24));
    let rle = mask.to_rle();
    let bbox = mask.bbox().unwrap();
    for i in 0..n {
        let id = format!("r{i:06}");
        m.records.push(ImageRecord::real(&id, format!("reals/{id}.png"), 64, 64, "fixture"));
        m.annotations.push(ObjectAnnotation {
            record_id: id,
            category: cats[i % cats.len()].into(),
            supercategory: m.taxonomy[cats[i % cats.len()]].clone(),
            mask: rle.clone(),
            bbox,
        });
    }
    m
}

fn manifest_arithmetic() -> Outcome {
    let params = GenParams::default();
    let mut detail = Vec::new();
    for n in [1usize, 7, 10_000] {
        let m = annotated_reals(n);
        let t0 = Instant::now();
        let jobs = plan_fake_variants(&m, 42, &params).map_err(|e| e.to_string())?;
        let elapsed = t0.elapsed();
        check(jobs.len() == 6 * n, format!("N={n}: {} jobs, expected {}", jobs.len(), 6 * n))?;
        let mut per: BTreeMap<Variant, usize> = BTreeMap::new();
        for j in &jobs {
            *per.entry(j.variant).or_default() += 1;
        }
        check(
            per.len() == 6 && per.values().all(|&c| c == n),
            format!("N={n}: variant counts {per:?}"),
        )?;
        if n == 10_000 {
            within(elapsed, Duration::from_secs(1))?;
            detail.push(format!("N=10000 -> 60000 jobs in {elapsed:.2?}"));
        }
    }
    let n = 51_517;
    let jobs = plan_fake_variants(&annotated_reals(n), 42, &params).map_err(|e| e.to_string())?;
    check(jobs.len() == 309_102, format!("51517 reals gave {} jobs", jobs.len()))?;
    detail.push("51517 -> 309102".into());
    Ok(detail.join(", "))
}

// ------------------------------------------------------------- compositing

fn random_image(w: u32, h: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
}

fn compositing_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t in 0..100 {
        let (w, h) = (rng.random_range(1..80u32), rng.random_range(1..80u32));
        let orig = random_image(w, h, &mut rng);
        let gen = random_image(w, h, &mut rng);
        let density = rng.random_range(0.0..1.0);
        let bits: Vec<bool> = (0..w * h).map(|_| rng.random_bool(density)).collect();
        let mask = BinaryMask::from_fn(w, h, |x, y| bits[(y * w + x) as usize]);
        let out = composite_background(&orig, &gen, &mask).map_err(|e| e.to_string())?;
        for y in 0..h {
            for x in 0..w {
                let want = if bits[(y * w + x) as usize] { gen.get_pixel(x, y) } else { orig.get_pixel(x, y) };
                check(out.get_pixel(x, y) == want, format!("triple {t}: pixel ({x},{y}) differs"))?;
            }
        }
        let empty = composite_background(&orig, &gen, &BinaryMask::empty(w, h)).map_err(|e| e.to_string())?;
        check(empty == orig, format!("triple {t}: empty mask is not the original"))?;
        let full = composite_background(&orig, &gen, &BinaryMask::full(w, h)).map_err(|e| e.to_string())?;
        check(full == gen, format!("triple {t}: full mask is not the generated image"))?;
    }
    Ok("100 random triples bit-exact, empty/full identities hold".into())
}

// ----------------------------------------------------------- crop contract

fn random_probe(crop: u32, seed: u64) -> ToyProbe {
    let spec = FeatureSpec::new(16, crop);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.dim();
    ToyProbe {
        weights: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        bias: rng.random_range(-0.5..0.5),
        feature_mean: (0..d).map(|_| rng.random_range(-0.1..0.1)).collect(),
        feature_scale: (0..d).map(|_| rng.random_range(0.5..2.0)).collect(),
        feature_spec: spec,
        training_log: TrainingLog::default(),
    }
}

fn crop_contract() -> Outcome {
    let style = SceneStyle::default();
    let small = scene(504, 504, 1, &style);
    let big = scene(1008, 1008, 2, &style);
    let stub = ConstantScorer(2.0);
    let probe = random_probe(504, 3);

    for (name, scorer) in [("stub", &stub as &dyn CropScorer), ("probe", &probe as &dyn CropScorer)] {
        let raw = scorer.score_crop(&small).unwrap();
        let s = detector::score_image(scorer, &small, 504).map_err(|e| e.to_string())?;
        check(
            s.logit.to_bits() == raw.to_bits() && s.crops == 1,
            format!("{name}: 504 score {} != raw crop logit {raw}", s.logit),
        )?;

        let mut sum = 0.0;
        for (x, y) in [(0, 0), (504, 0), (0, 504), (504, 504)] {
            let crop = image::imageops::crop_imm(&big, x, y, 504, 504).to_image();
            sum += scorer.score_crop(&crop).unwrap();
        }
        let brute = sum / 4.0;
        let s = detector::score_image(scorer, &big, 504).map_err(|e| e.to_string())?;
        check(
            (s.logit - brute).abs() <= 1e-12 && s.crops == 4,
            format!("{name}: 1008 score {} vs brute-force mean {brute}", s.logit),
        )?;
        if name == "stub" {
            check(s.logit == 2.0, "stub 1008 score is not 2.0")?;
        }
    }
    Ok("504 exact and 1008 = mean of 4 crops for stub and toy probe".into())
}

// ---------------------------------------------------------- early stopping

/// The rule written out directly: stop index of the first evaluation that
/// makes `patience` consecutive non-improvements, if any.
fn oracle_stop(trace: &[f64], min_delta: f64, patience: u32) -> Option<usize> {
    let mut best = f64::NEG_INFINITY;
    let mut bad = 0;
    for (i, &v) in trace.iter().enumerate() {
        if v >= best + min_delta {
            best = v;
            bad = 0;
        } else {
            bad += 1;
            if bad == patience {
                return Some(i);
            }
        }
    }
    None
}

fn early_stopping() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let base = EarlyStopState::default();
    check(
        base.min_delta == 0.001 && base.patience == 5 && base.eval_interval == 3435,
        format!("defaults {base:?}"),
    )?;
    let mut stops = 0;
    for t in 0..1000 {
        let len = rng.random_range(1..60);
        let mut v: f64 = rng.random_range(0.5..0.9);
        let trace: Vec<f64> = (0..len)
            .map(|_| {
                // Steps on a 0.0005 grid, so improvements of exactly one
                // min_delta and just under it both occur.
                v = (v + f64::from(rng.random_range(-3..=4i32)) * 0.0005).clamp(0.0, 1.0);
                v
            })
            .collect();
        let want = oracle_stop(&trace, base.min_delta, base.patience);
        let mut s = base;
        let mut got = None;
        for (i, &x) in trace.iter().enumerate() {
            let (next, go, _) = early_stop_step(s, x);
            s = next;
            check(s.evals_since_improve <= s.patience, format!("trace {t}: counter exceeded patience"))?;
            if !go {
                got = Some(i);
                break;
            }
        }
        check(got == want, format!("trace {t}: stop {got:?}, oracle {want:?}"))?;
        if let Some(i) = got {
            stops += 1;
            let iteration = (i as u64 + 1) * base.eval_interval;
            check(iteration % 3435 == 0, "stop iteration off the evaluation grid")?;
        }
    }
    Ok(format!("1000 traces match the oracle ({stops} stopped)"))
}

// -------------------------------------------------------------- toy e2e

const TOY: u32 = 128;

fn write_record(dir: &Path, id: &str, img: &RgbImage, fake: bool, pair: &str) -> ImageRecord {
    let rel = format!("{id}.png");
    raster::write_bytes(&dir.join(&rel), &raster::encode_png(img)).unwrap();
    let mut r = ImageRecord::real(id, rel, img.width(), img.height(), "toy");
    if fake {
        r.label = Label::Fake;
        r.variant = Variant::SelfCond;
        r.generator_tag = "mock-fingerprint".into();
    }
    r.pair_id = pair.into();
    r
}

fn self_cond(img: &RgbImage, cfg: &MockConfig) -> RgbImage {
    mock_generate(img, &BinaryMask::empty(img.width(), img.height()), 0, cfg).unwrap()
}

fn aligned_pairs(dir: &Path, prefix: &str, seeds: std::ops::Range<u64>, style: &SceneStyle, cfg: &MockConfig) -> DatasetManifest {
    let mut m = DatasetManifest::default();
    for s in seeds {
        let real = scene(TOY, TOY, s, style);
        let id = format!("{prefix}{s}");
        m.records.push(write_record(dir, &id, &real, false, &id));
        m.records.push(write_record(dir, &format!("{id}f"), &self_cond(&real, cfg), true, &id));
    }
    m
}

fn auc_of(probe: &ToyProbe, m: &DatasetManifest, base: &Path) -> f64 {
    let records: Vec<&ImageRecord> = m.records.iter().collect();
    let scores = detector::score_records(probe, &records, m, base, TOY, 4, |_, i| Ok(i)).unwrap();
    let p: Vec<f64> = scores.iter().map(|s| s.prob).collect();
    metrics::auc(&ScoreSet::from_pairs(&p, &alignbench_core::pipeline::labels(m))).unwrap()
}

struct ToyRun {
    dir: tempfile::TempDir,
    probe: ToyProbe,
    test: DatasetManifest,
}

fn toy_schedule() -> TrainSchedule {
    TrainSchedule {
        batch_size: 32,
        learning_rate: 0.02,
        max_iterations: 4000,
        early_stop: EarlyStopState {
            eval_interval: 25,
            ..EarlyStopState::default()
        },
        seed: 1,
    }
}

fn toy_end_to_end(shared: &mut Option<ToyRun>) -> Outcome {
    let t0 = Instant::now();
    let cfg = MockConfig::default();
    let neutral = SceneStyle {
        blur_sigma: 0.6,
        ..SceneStyle::default()
    };
    let smooth = SceneStyle {
        blur_sigma: 1.2,
        ..SceneStyle::default()
    };
    let sharp = SceneStyle::default();
    let spec = FeatureSpec::new(32, TOY);
    let policy = AugPolicy::identity();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    // Held out, fingerprinted, content-aligned.
    let test = aligned_pairs(d, "t", 90_000..90_100, &neutral, &cfg);

    // (a) 250 reals + their 250 self-conditioned fakes.
    let train = aligned_pairs(d, "a", 0..250, &neutral, &cfg);
    let val = aligned_pairs(d, "av", 50_000..50_050, &neutral, &cfg);
    let aligned = detector::train_probe(&train, d, &val, d, &policy, &spec, &toy_schedule()).map_err(|e| e.to_string())?;
    let auc_a = auc_of(&aligned, &test, d);

    // (b) 250 smooth reals vs 250 unrelated sharp images, no fingerprint.
    let mut train = DatasetManifest::default();
    let mut val = DatasetManifest::default();
    for (m, range, tag) in [(&mut train, 0..250u64, "b"), (&mut val, 0..50u64, "bv")] {
        for i in range {
            let (rid, fid) = (format!("{tag}{i}"), format!("{tag}{i}f"));
            m.records.push(write_record(d, &rid, &scene(TOY, TOY, 10_000 + i + 1000 * u64::from(tag == "bv"), &smooth), false, &rid));
            m.records.push(write_record(d, &fid, &scene(TOY, TOY, 20_000 + i + 1000 * u64::from(tag == "bv"), &sharp), true, &fid));
        }
    }
    let biased = detector::train_probe(&train, d, &val, d, &policy, &spec, &toy_schedule()).map_err(|e| e.to_string())?;
    let biased_val = biased.training_log.evaluations.iter().map(|e| e.val_bacc).fold(0.0, f64::max);
    let auc_b = auc_of(&biased, &test, d);
    let elapsed = t0.elapsed();

    check(auc_a >= 0.95, format!("aligned AUC {auc_a:.4} < 0.95"))?;
    check(auc_b <= 0.65, format!("biased AUC {auc_b:.4} > 0.65"))?;
    within(elapsed, Duration::from_secs(300))?;
    *shared = Some(ToyRun {
        dir,
        probe: aligned,
        test,
    });
    Ok(format!(
        "aligned AUC {auc_a:.4} (>= 0.95); biased AUC {auc_b:.4} (<= 0.65, its own val bAcc {biased_val:.2}); {elapsed:.1?}"
    ))
}

// ------------------------------------------------------------------ audit

fn audit_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut m = DatasetManifest::default();
    for i in 0..40u64 {
        let real = scene(96, 96, i, &SceneStyle::default());
        let rid = format!("r{i}");
        let rel = format!("{rid}.jpg");
        raster::write_bytes(&d.join(&rel), &raster::encode_jpeg(&real, 85)).unwrap();
        m.records.push(ImageRecord::real(&rid, rel, 96, 96, "fixture"));
        m.records.push(write_record(d, &format!("f{i}"), &self_cond(&real, &MockConfig::default()), true, &rid));
    }
    audit::annotate_formats(&mut m, d).map_err(|e| e.to_string())?;
    let qfs: Vec<Option<u8>> = m.reals().map(|r| r.jpeg_qf).collect();
    check(qfs.iter().all(|q| q.is_some_and(|q| q.abs_diff(85) <= 1)), format!("estimated real QFs {qfs:?}"))?;
    let th = AuditThresholds::default();
    let before = audit::format_bias_report(&m, &th).map_err(|e| e.to_string())?;
    check(before.ks_container == 1.0, format!("container KS {}", before.ks_container))?;
    check(before.flags.container, "container bias not flagged")?;

    let out = d.join("dataset_unbiased");
    let rb = audit::rebalance_compression(&m, d, &out, 9, &th).map_err(|e| e.to_string())?;
    // Re-audit from the bytes actually written.
    let mut again = rb.manifest.clone();
    audit::annotate_formats(&mut again, &out).map_err(|e| e.to_string())?;
    check(again.fakes().all(|f| f.container == Container::Jpeg), "rebalanced fakes are not JPEG")?;
    let after = audit::format_bias_report(&again, &th).map_err(|e| e.to_string())?;
    check(after.ks_jpeg_qf < 0.1, format!("KS(QF) after rebalance {}", after.ks_jpeg_qf))?;
    check(!after.flags.any(), format!("flags after rebalance {:?}", after.flags))?;
    Ok(format!(
        "before: container KS {:.2} flagged; after: KS(QF) {:.3}, no flags",
        before.ks_container, after.ks_jpeg_qf
    ))
}

// ------------------------------------------------------------- robustness

fn robustness_sanity(shared: &Option<ToyRun>) -> Outcome {
    let run = shared.as_ref().ok_or("toy end-to-end run did not produce a probe")?;
    let base = run.dir.path();
    let mcfg = metrics::MetricsConfig::default();
    let input = SweepInput {
        scorer: &run.probe,
        crop_size: TOY,
        manifest: &run.test,
        base,
        metrics: mcfg,
        seed: 3,
        workers: 4,
    };

    let records: Vec<&ImageRecord> = run.test.records.iter().collect();
    let direct = detector::score_records(&run.probe, &records, &run.test, base, TOY, 1, |_, i| Ok(i)).unwrap();
    let probs: Vec<f64> = direct.iter().map(|s| s.prob).collect();
    let reference = metrics::evaluate(
        &ScoreSet::from_pairs(&probs, &alignbench_core::pipeline::labels(&run.test)),
        &mcfg,
    )
    .unwrap();
    let identity = robustness_sweep(&input, &[PerturbationSpec::None]).map_err(|e| e.to_string())?;
    let row = &identity[0].0;
    check(
        row.bacc == reference.bacc && row.auc == reference.auc && row.ece == reference.ece && row.nll == reference.nll,
        format!("identity point {row:?} vs unperturbed {reference:?}"),
    )?;

    let grid: Vec<PerturbationSpec> = [0.0, 1.0, 2.0, 3.0].map(|sigma| PerturbationSpec::Blur { sigma }).to_vec();
    let rows = robustness_sweep(&input, &grid).map_err(|e| e.to_string())?;
    let bacc: Vec<f64> = rows.iter().map(|(r, _)| r.bacc.unwrap()).collect();
    check(rows.len() == 4, "blur grid lost points")?;
    for w in bacc.windows(2) {
        check(w[1] <= w[0] + 0.02, format!("bAcc rises along blur grid: {bacc:?}"))?;
    }

    for seed in 0..10_000u64 {
        let p = augment::sample_social(seed);
        check(
            (0.7..=1.0).contains(&p.scale) && (70..=100).contains(&p.qf),
            format!("seed {seed}: social params {p:?}"),
        )?;
    }
    let fmt: Vec<String> = bacc.iter().map(|b| format!("{b:.3}")).collect();
    Ok(format!(
        "identity exact; blur bAcc [{}]; 10000 social draws in bounds",
        fmt.join(", ")
    ))
}

// --------------------------------------------------------------- spectral

fn plane(s: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..s * s).map(|_| rng.random_range(0.0..255.0)).collect()
}

fn spectral_module() -> Outcome {
    let s = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a: Vec<Vec<f64>> = (0..6).map(|_| plane(s, &mut rng)).collect();
    let b: Vec<Vec<f64>> = (0..6).map(|_| plane(s, &mut rng)).collect();

    let same: Vec<(Vec<f64>, Vec<f64>)> = a.iter().map(|x| (x.clone(), x.clone())).collect();
    let zero = spectral::diff_power_spectrum_planes(&same, s, PairKind::Custom).map_err(|e| e.to_string())?;
    check(zero.power.iter().all(|&v| v == 0.0), "identical pairs give a nonzero map")?;

    // Injected sinusoid at (u, v) = (5, 9) cycles per window.
    let (u, v) = (5usize, 9usize);
    let injected: Vec<(Vec<f64>, Vec<f64>)> = a
        .iter()
        .map(|x| {
            let y = (0..s * s)
                .map(|i| {
                    let (px, py) = ((i % s) as f64, (i / s) as f64);
                    x[i] + 20.0 * (2.0 * std::f64::consts::PI * (u as f64 * px + v as f64 * py) / s as f64).cos()
                })
                .collect();
            (y, x.clone())
        })
        .collect();
    let map = spectral::diff_power_spectrum_planes(&injected, s, PairKind::Custom).map_err(|e| e.to_string())?;
    let c = s / 2;
    let peak = map.at(c + v, c + u) + map.at(c - v, c - u);
    let frac = peak / map.total();
    check(frac > 0.99, format!("sinusoid energy fraction {frac}"))?;

    // Parseval: total / S^2 equals the mean squared difference.
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = a.iter().cloned().zip(b.iter().cloned()).collect();
    let m = spectral::diff_power_spectrum_planes(&pairs, s, PairKind::Custom).map_err(|e| e.to_string())?;
    let msd: f64 = pairs
        .iter()
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / (s * s) as f64)
        .sum::<f64>()
        / pairs.len() as f64;
    let rel = (m.total() / (s * s) as f64 - msd).abs() / msd;
    check(rel <= 1e-6, format!("Parseval relative error {rel:e}"))?;

    // Linearity: the average over A ∪ B is the count-weighted average of the parts.
    let (pa, pb) = pairs.split_at(2);
    let ma = spectral::diff_power_spectrum_planes(pa, s, PairKind::Custom).unwrap();
    let mb = spectral::diff_power_spectrum_planes(pb, s, PairKind::Custom).unwrap();
    let (na, nb) = (pa.len() as f64, pb.len() as f64);
    let mut lin = 0.0f64;
    for i in 0..s * s {
        let want = (na * ma.power[i] + nb * mb.power[i]) / (na + nb);
        lin = lin.max((m.power[i] - want).abs() / want.abs().max(1.0));
    }
    check(lin <= 1e-9, format!("averaging linearity error {lin:e}"))?;
    Ok(format!(
        "zero map exact; sinusoid {:.4}% at its bin; Parseval {rel:.1e}; linearity {lin:.1e}",
        100.0 * frac
    ))
}

fn main() {
    let mut toy = None;
    let results: Vec<(&str, Outcome)> = vec![
        ("metric oracle suite", metric_oracle_suite()),
        ("manifest arithmetic", manifest_arithmetic()),
        ("compositing exactness", compositing_exactness()),
        ("crop contract", crop_contract()),
        ("early stopping", early_stopping()),
        ("toy end-to-end", toy_end_to_end(&mut toy)),
        ("audit round trip", audit_round_trip()),
        ("robustness sweep sanity", robustness_sanity(&toy)),
        ("spectral module", spectral_module()),
    ];
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
