//! Correctness prediction from per-layer hyperplane distances.
//!
//! A second-stage logistic model maps the signed distances of a record to a
//! pair's probe hyperplanes (one per layer) to a raw score, and a monotone map
//! fit on a validation split turns scores into probabilities.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::ActivationBundle;
use crate::error::{Error, Result};
use crate::logistic::{self, sigmoid, LogisticConfig};
use crate::probe::{PairKey, ProbeGrid};
use crate::rng::SeedKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Calibration {
    Platt,
    Isotonic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UqConfig {
    pub min_correct: usize,
    pub min_wrong: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Use `|d|` instead of signed distances.
    pub absolute: bool,
    pub calibration: Calibration,
    pub n_bins: usize,
    pub logistic: LogisticConfig,
}

impl Default for UqConfig {
    fn default() -> Self {
        UqConfig {
            min_correct: 25,
            min_wrong: 25,
            train_fraction: 0.6,
            val_fraction: 0.2,
            absolute: false,
            calibration: Calibration::Platt,
            n_bins: 10,
            logistic: LogisticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UqRow {
    pub record_id: String,
    pub output_label: String,
    /// One feature per layer; positive means toward `output_label`.
    pub distances: Vec<f64>,
    pub is_correct: bool,
    pub part: Part,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UqDataset {
    pub label_a: String,
    pub label_b: String,
    pub n_layers: usize,
    pub rows: Vec<UqRow>,
}

impl UqDataset {
    pub fn part(&self, part: Part) -> impl Iterator<Item = &UqRow> {
        self.rows.iter().filter(move |r| r.part == part)
    }

    pub fn count(&self, part: Part) -> usize {
        self.part(part).count()
    }
}

/// Distance of `x` to the pair's layer hyperplane, positive toward `toward`.
fn oriented_distance(
    grid: &ProbeGrid,
    a: &str,
    b: &str,
    layer: usize,
    toward: &str,
    x: &[f32],
) -> Result<f64> {
    let (probe, _) = grid.probe(a, b, layer).ok_or_else(|| {
        Error::InsufficientData(format!("no probe for ({a}, {b}) at layer {layer}"))
    })?;
    let d = probe.distance(x)?;
    Ok(if probe.label_b == toward { d } else { -d })
}

/// Records misclassified within the pair, in either direction.
fn misclassified_rows(bundle: &ActivationBundle, a: &str, b: &str) -> Vec<usize> {
    bundle
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| {
            !r.correct
                && r.predicted_label.as_deref().is_some_and(|p| {
                    (r.true_label == a && p == b) || (r.true_label == b && p == a)
                })
        })
        .map(|(i, _)| i)
        .collect()
}

/// Splits indices of one class into train/val/test, each non-empty.
fn split_class(idx: &mut [usize], cfg: &UqConfig, rng: &mut impl rand::Rng) -> Vec<(usize, Part)> {
    idx.shuffle(rng);
    let n = idx.len();
    let n_val = ((cfg.val_fraction * n as f64).round() as usize).max(1);
    let test_fraction = 1.0 - cfg.train_fraction - cfg.val_fraction;
    let n_test = ((test_fraction * n as f64).round() as usize).max(1);
    let n_train = n - n_val - n_test;
    idx.iter()
        .enumerate()
        .map(|(k, &i)| {
            let part = if k < n_train {
                Part::Train
            } else if k < n_train + n_val {
                Part::Val
            } else {
                Part::Test
            };
            (i, part)
        })
        .collect()
}

/// Builds the correctness dataset of the unordered pair `(a, b)`.
///
/// Correct rows are the pair probe's held-out test records; misclassified rows
/// are records whose (true, predicted) labels are the pair in either order.
pub fn build_uq_dataset(
    bundle: &ActivationBundle,
    grid: &ProbeGrid,
    a: &str,
    b: &str,
    cfg: &UqConfig,
    seed: u64,
) -> Result<UqDataset> {
    let test_total = 1.0 - cfg.train_fraction - cfg.val_fraction;
    if !(cfg.train_fraction > 0.0 && cfg.val_fraction > 0.0 && test_total > 0.0) {
        return Err(Error::invalid("uq split fractions must be positive and sum below 1"));
    }
    let split = grid
        .split(a, b)
        .ok_or_else(|| Error::InsufficientData(format!("no probes for pair ({a}, {b})")))?;
    for layer in 0..grid.n_layers {
        if grid.probe(a, b, layer).is_none() {
            return Err(Error::InsufficientData(format!(
                "pair ({a}, {b}) has no probe at layer {layer}"
            )));
        }
    }
    let by_id: HashMap<&str, usize> = bundle
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.record_id.as_str(), i))
        .collect();
    let mut correct = Vec::with_capacity(split.test_ids.len());
    for id in &split.test_ids {
        let &i = by_id.get(id.as_str()).ok_or_else(|| {
            Error::invalid(format!("probe test record `{id}` is not in the bundle"))
        })?;
        correct.push(i);
    }
    let mut wrong = misclassified_rows(bundle, a, b);
    let floor = cfg.min_correct.max(3);
    if correct.len() < floor {
        return Err(Error::InsufficientData(format!(
            "pair ({a}, {b}): {} correct rows, minimum {} (correct-sample threshold)",
            correct.len(),
            floor
        )));
    }
    let floor = cfg.min_wrong.max(3);
    if wrong.len() < floor {
        return Err(Error::InsufficientData(format!(
            "pair ({a}, {b}): {} misclassified rows, minimum {} (misclassified-sample threshold)",
            wrong.len(),
            floor
        )));
    }

    let mut rng = SeedKey::new(seed).str("uq-split").str(a).str(b).rng();
    let mut parts = split_class(&mut correct, cfg, &mut rng);
    parts.extend(split_class(&mut wrong, cfg, &mut rng));
    parts.sort_unstable();

    let rows = parts
        .into_iter()
        .map(|(i, part)| {
            let rec = &bundle.records[i];
            let output = rec.predicted_label.clone().unwrap_or_else(|| rec.true_label.clone());
            let distances = (0..grid.n_layers)
                .map(|l| {
                    let d = oriented_distance(grid, a, b, l, &output, bundle.vector(l, i))?;
                    Ok(if cfg.absolute { d.abs() } else { d })
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(UqRow {
                record_id: rec.record_id.clone(),
                output_label: output,
                distances,
                is_correct: rec.correct,
                part,
            })
        })
        .collect::<Result<Vec<UqRow>>>()?;
    Ok(UqDataset {
        label_a: a.to_string(),
        label_b: b.to_string(),
        n_layers: grid.n_layers,
        rows,
    })
}

/// Monotone nondecreasing map from raw score to probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CalibrationMap {
    /// `σ(a·s + b)` with `a ≥ 0`.
    Sigmoid { a: f64, b: f64 },
    /// Step function: value of the last threshold `<= s`, first value below all.
    Isotonic { thresholds: Vec<f64>, values: Vec<f64> },
}

impl CalibrationMap {
    pub fn apply(&self, s: f64) -> f64 {
        match self {
            CalibrationMap::Sigmoid { a, b } => sigmoid(a * s + b),
            CalibrationMap::Isotonic { thresholds, values } => {
                let k = thresholds.partition_point(|t| *t <= s);
                values[k.saturating_sub(1)]
            }
        }
    }
}

/// Platt scaling with smoothed targets, constrained to a nonnegative slope.
pub fn fit_platt(scores: &[f64], outcomes: &[bool]) -> Result<CalibrationMap> {
    check_lengths(scores.len(), outcomes.len())?;
    let n_pos = outcomes.iter().filter(|o| **o).count() as f64;
    let n_neg = outcomes.len() as f64 - n_pos;
    let (t_pos, t_neg) = ((n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0));
    let t: Vec<f64> = outcomes.iter().map(|&o| if o { t_pos } else { t_neg }).collect();

    let loss = |a: f64, b: f64| -> f64 {
        scores
            .iter()
            .zip(&t)
            .map(|(s, t)| {
                let z = a * s + b;
                logistic::softplus(z) - t * z
            })
            .sum()
    };
    let fit = |fix_slope: bool| -> (f64, f64) {
        let (mut a, mut b) = (0.0, ((n_pos + 1.0) / (n_neg + 1.0)).ln());
        for _ in 0..200 {
            let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (s, t) in scores.iter().zip(&t) {
                let p = sigmoid(a * s + b);
                let w = p * (1.0 - p);
                ga += (p - t) * s;
                gb += p - t;
                haa += w * s * s;
                hab += w * s;
                hbb += w;
            }
            let (da, db) = if fix_slope {
                (0.0, gb / (hbb + 1e-12))
            } else {
                let (haa, hbb) = (haa + 1e-12, hbb + 1e-12);
                let det = haa * hbb - hab * hab;
                ((hbb * ga - hab * gb) / det, (haa * gb - hab * ga) / det)
            };
            if ga.abs().max(gb.abs()) < 1e-10 || (da.abs() + db.abs()) < 1e-14 {
                break;
            }
            let f0 = loss(a, b);
            let mut step = 1.0;
            while step > 1e-10 && loss(a - step * da, b - step * db) > f0 {
                step *= 0.5;
            }
            a -= step * da;
            b -= step * db;
        }
        (a, b)
    };
    let (a, b) = fit(false);
    let (a, b) = if a < 0.0 { fit(true) } else { (a, b) };
    Ok(CalibrationMap::Sigmoid { a, b })
}

/// Isotonic regression (pool adjacent violators) of outcomes on scores.
pub fn fit_isotonic(scores: &[f64], outcomes: &[bool]) -> Result<CalibrationMap> {
    check_lengths(scores.len(), outcomes.len())?;
    if scores.is_empty() {
        return Err(Error::InsufficientData("isotonic calibration needs data".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    // blocks of (first score, sum, count)
    let mut blocks: Vec<(f64, f64, f64)> = Vec::new();
    for &i in &order {
        let y = if outcomes[i] { 1.0 } else { 0.0 };
        match blocks.last_mut() {
            Some(last) if last.0 == scores[i] => {
                last.1 += y;
                last.2 += 1.0;
            }
            _ => blocks.push((scores[i], y, 1.0)),
        }
        while blocks.len() > 1 {
            let k = blocks.len();
            let (prev, cur) = (blocks[k - 2], blocks[k - 1]);
            if prev.1 / prev.2 <= cur.1 / cur.2 {
                break;
            }
            blocks[k - 2] = (prev.0, prev.1 + cur.1, prev.2 + cur.2);
            blocks.pop();
        }
    }
    Ok(CalibrationMap::Isotonic {
        thresholds: blocks.iter().map(|b| b.0).collect(),
        values: blocks.iter().map(|b| b.1 / b.2).collect(),
    })
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            context: "scores and outcomes".into(),
            expected: a,
            found: b,
        });
    }
    Ok(())
}

/// Equal-width-bin expected calibration error; empty bins are skipped.
pub fn expected_calibration_error(probs: &[f64], outcomes: &[bool], n_bins: usize) -> Result<f64> {
    let bins = reliability_bins(probs, outcomes, n_bins)?;
    let n = probs.len() as f64;
    Ok(bins
        .iter()
        .map(|b| (b.count as f64 / n) * (b.mean_prob - b.accuracy).abs())
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub center: f64,
    pub mean_prob: f64,
    pub accuracy: f64,
    pub count: usize,
}

/// Non-empty reliability bins, ascending.
pub fn reliability_bins(probs: &[f64], outcomes: &[bool], n_bins: usize) -> Result<Vec<ReliabilityBin>> {
    check_lengths(probs.len(), outcomes.len())?;
    if n_bins == 0 {
        return Err(Error::invalid("n_bins must be at least 1"));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
    }
    let mut acc = vec![(0.0, 0.0, 0usize); n_bins];
    for (&p, &o) in probs.iter().zip(outcomes) {
        let b = ((p * n_bins as f64).floor() as usize).min(n_bins - 1);
        acc[b].0 += p;
        acc[b].1 += if o { 1.0 } else { 0.0 };
        acc[b].2 += 1;
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .filter(|(_, (_, _, c))| *c > 0)
        .map(|(b, (sp, so, c))| ReliabilityBin {
            center: (b as f64 + 0.5) / n_bins as f64,
            mean_prob: sp / c as f64,
            accuracy: so / c as f64,
            count: c,
        })
        .collect())
}

pub fn reliability_csv(bins: &[ReliabilityBin]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["bin_center", "mean_prob", "accuracy", "count"])?;
    for b in bins {
        w.write_record([
            b.center.to_string(),
            b.mean_prob.to_string(),
            b.accuracy.to_string(),
            b.count.to_string(),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::invalid(format!("csv flush: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Probability that a positive outscores a negative, ties counted half.
pub fn auc_roc(scores: &[f64], outcomes: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), outcomes.len())?;
    let n_pos = outcomes.iter().filter(|o| **o).count();
    let n_neg = outcomes.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InsufficientData("AUC needs both outcome classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    // midranks of tied groups, doubled to stay in integers
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u128;
        for &k in &order[i..=j] {
            if outcomes[k] {
                rank_sum2 += twice_mid;
            }
        }
        i = j + 1;
    }
    let (p, q) = (n_pos as u128, n_neg as u128);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * q) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UqMetrics {
    pub accuracy: f64,
    pub auc_roc: f64,
    pub ece: f64,
    pub baseline_accuracy: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedUqModel {
    pub label_a: String,
    pub label_b: String,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub calibration: CalibrationMap,
    /// Test-split metrics.
    pub metrics: UqMetrics,
    pub val_ece_raw: f64,
    pub val_ece_calibrated: f64,
    /// The fitted map scored worse on validation than the raw sigmoid and was replaced by it.
    pub identity_fallback: bool,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl CalibratedUqModel {
    pub fn raw_score(&self, distances: &[f64]) -> f64 {
        self.weights.iter().zip(distances).map(|(w, d)| w * d).sum::<f64>() + self.bias
    }

    pub fn predict(&self, distances: &[f64]) -> f64 {
        self.calibration.apply(self.raw_score(distances))
    }
}

fn features<'a>(rows: impl Iterator<Item = &'a UqRow>, n_layers: usize) -> (DMatrix<f64>, Vec<bool>) {
    let rows: Vec<&UqRow> = rows.collect();
    let x = DMatrix::from_fn(rows.len(), n_layers, |i, j| rows[i].distances[j]);
    (x, rows.iter().map(|r| r.is_correct).collect())
}

fn majority(outcomes: &[bool]) -> f64 {
    let pos = outcomes.iter().filter(|o| **o).count();
    pos.max(outcomes.len() - pos) as f64 / outcomes.len() as f64
}

/// Accuracy at 0.5, AUC, ECE and majority baseline of `model` on `rows`.
pub fn evaluate<'a>(
    model: &CalibratedUqModel,
    rows: impl Iterator<Item = &'a UqRow>,
    n_bins: usize,
) -> Result<UqMetrics> {
    let (probs, outcomes): (Vec<f64>, Vec<bool>) =
        rows.map(|r| (model.predict(&r.distances), r.is_correct)).unzip();
    metrics_of(&probs, &outcomes, n_bins)
}

fn metrics_of(probs: &[f64], outcomes: &[bool], n_bins: usize) -> Result<UqMetrics> {
    if probs.is_empty() {
        return Err(Error::InsufficientData("no rows to evaluate".into()));
    }
    let hits = probs
        .iter()
        .zip(outcomes)
        .filter(|(p, o)| (**p >= 0.5) == **o)
        .count();
    Ok(UqMetrics {
        accuracy: hits as f64 / probs.len() as f64,
        auc_roc: auc_roc(probs, outcomes)?,
        ece: expected_calibration_error(probs, outcomes, n_bins)?,
        baseline_accuracy: majority(outcomes),
        n: probs.len(),
    })
}

fn both_classes(y: &[bool], part: &str) -> Result<()> {
    if y.iter().all(|v| *v) || y.iter().all(|v| !*v) {
        return Err(Error::InsufficientData(format!("{part} split has a single class")));
    }
    Ok(())
}

/// Fits the base model on train rows and the calibration on val rows; metrics
/// come from test rows only.
pub fn train_uq_model(ds: &UqDataset, cfg: &UqConfig) -> Result<CalibratedUqModel> {
    let (xt, yt) = features(ds.part(Part::Train), ds.n_layers);
    let (xv, yv) = features(ds.part(Part::Val), ds.n_layers);
    both_classes(&yt, "train")?;
    both_classes(&yv, "validation")?;
    let base = logistic::fit(&xt, &yt, &cfg.logistic, None)?;
    let val_scores: Vec<f64> = base.decision(&xv).iter().copied().collect();
    let fitted = match cfg.calibration {
        Calibration::Platt => fit_platt(&val_scores, &yv)?,
        Calibration::Isotonic => fit_isotonic(&val_scores, &yv)?,
    };
    let raw_probs: Vec<f64> = val_scores.iter().map(|&s| sigmoid(s)).collect();
    let val_ece_raw = expected_calibration_error(&raw_probs, &yv, cfg.n_bins)?;
    let cal_probs: Vec<f64> = val_scores.iter().map(|&s| fitted.apply(s)).collect();
    let fitted_ece = expected_calibration_error(&cal_probs, &yv, cfg.n_bins)?;
    let identity_fallback = fitted_ece > val_ece_raw;
    let (calibration, val_ece_calibrated) = if identity_fallback {
        (CalibrationMap::Sigmoid { a: 1.0, b: 0.0 }, val_ece_raw)
    } else {
        (fitted, fitted_ece)
    };
    let mut model = CalibratedUqModel {
        label_a: ds.label_a.clone(),
        label_b: ds.label_b.clone(),
        weights: base.weights.iter().copied().collect(),
        bias: base.bias,
        calibration,
        metrics: UqMetrics { accuracy: 0.0, auc_roc: 0.0, ece: 0.0, baseline_accuracy: 0.0, n: 0 },
        val_ece_raw,
        val_ece_calibrated,
        identity_fallback,
        n_train: yt.len(),
        n_val: yv.len(),
        n_test: ds.count(Part::Test),
    };
    model.metrics = evaluate(&model, ds.part(Part::Test), cfg.n_bins)?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub label_a: String,
    pub label_b: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UqReport {
    pub per_pair: Vec<CalibratedUqModel>,
    /// Metrics over the union of all pair test rows.
    pub pooled: Option<UqMetrics>,
    pub reliability: Vec<ReliabilityBin>,
    pub skipped: Vec<SkippedPair>,
    pub config: UqConfig,
}

/// Trains a model for every grid pair that meets the thresholds and pools
/// test predictions.
pub fn run_uq(bundle: &ActivationBundle, grid: &ProbeGrid, cfg: &UqConfig, seed: u64) -> Result<UqReport> {
    let pairs: Vec<PairKey> = grid.pairs();
    let outcomes: Vec<(PairKey, Result<(CalibratedUqModel, Vec<f64>, Vec<bool>)>)> = pairs
        .into_par_iter()
        .map(|key| {
            let run = || {
                let ds = build_uq_dataset(bundle, grid, &key.a, &key.b, cfg, seed)?;
                let model = train_uq_model(&ds, cfg)?;
                let (p, o) = ds
                    .part(Part::Test)
                    .map(|r| (model.predict(&r.distances), r.is_correct))
                    .unzip();
                Ok((model, p, o))
            };
            let r = run();
            (key, r)
        })
        .collect();
    let mut per_pair = Vec::new();
    let mut skipped = Vec::new();
    let (mut probs, mut outs) = (Vec::new(), Vec::new());
    for (key, r) in outcomes {
        match r {
            Ok((m, p, o)) => {
                per_pair.push(m);
                probs.extend(p);
                outs.extend(o);
            }
            Err(e) => skipped.push(SkippedPair {
                label_a: key.a,
                label_b: key.b,
                reason: e.to_string(),
            }),
        }
    }
    let pooled = if probs.is_empty() { None } else { Some(metrics_of(&probs, &outs, cfg.n_bins)?) };
    let reliability = if probs.is_empty() { Vec::new() } else { reliability_bins(&probs, &outs, cfg.n_bins)? };
    Ok(UqReport { per_pair, pooled, reliability, skipped, config: *cfg })
}

/// Per-layer mean distance of the pair's misclassified records, positive
/// toward each record's predicted label.
pub fn margin_asymmetry_profile(
    bundle: &ActivationBundle,
    grid: &ProbeGrid,
    a: &str,
    b: &str,
) -> Result<Vec<f64>> {
    let rows = misclassified_rows(bundle, a, b);
    if rows.is_empty() {
        return Err(Error::InsufficientData(format!("pair ({a}, {b}) has no misclassified records")));
    }
    (0..grid.n_layers)
        .map(|l| {
            let mut sum = 0.0;
            for &i in &rows {
                let out = bundle.records[i].predicted_label.as_deref().expect("misclassified row");
                sum += oriented_distance(grid, a, b, l, out, bundle.vector(l, i))?;
            }
            Ok(sum / rows.len() as f64)
        })
        .collect()
}
