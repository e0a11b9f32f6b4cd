//! Balanced pairwise linear probes.
//!
//! For every unordered label pair and every layer, a logistic-regression
//! separator is trained on correctly classified records of the two labels,
//! downsampled to equal class sizes and split 80:20 with stratification.
//! The record-level split of a pair is shared by all of its layers.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{decode_f32, encode_f32, ActivationBundle, LabelSet};
use crate::error::{Error, Result};
use crate::logistic::{self, LogisticConfig};
use crate::rng::{replicate_rng, SeedKey};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub logistic: LogisticConfig,
    pub test_fraction: f64,
    /// Pairs with fewer balanced samples per class are left absent.
    pub min_per_class: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            logistic: LogisticConfig::default(),
            test_fraction: 0.2,
            min_per_class: 5,
        }
    }
}

/// Index sets of a stratified train/test split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Outcome of fitting one probe on a feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Signed hyperplane distance of every input row (positive = class `true`).
    pub margins: Vec<f64>,
    pub split: Split,
    pub n_per_class: usize,
    pub split_seed: u64,
    pub converged: bool,
    pub grad_norm: f64,
}

/// A trained separator between `label_a` (negative side) and `label_b` (positive side).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairProbe {
    pub label_a: String,
    pub label_b: String,
    pub layer: usize,
    #[serde(skip)]
    pub weights: Vec<f64>,
    pub bias: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub n_per_class: usize,
    pub split_seed: u64,
    pub converged: bool,
    pub grad_norm: f64,
}

impl PairProbe {
    pub fn weight_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    /// Signed distance of `x` to the hyperplane; positive on the `label_b` side.
    pub fn distance<T: Copy + Into<f64>>(&self, x: &[T]) -> Result<f64> {
        signed_distance(&self.weights, self.bias, x)
    }
}

pub fn signed_distance<T: Copy + Into<f64>>(weights: &[f64], bias: f64, x: &[T]) -> Result<f64> {
    if x.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            context: "hyperplane distance".into(),
            expected: weights.len(),
            found: x.len(),
        });
    }
    let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Degenerate("probe has zero-norm weights".into()));
    }
    let dot: f64 = weights.iter().zip(x).map(|(w, &v)| w * v.into()).sum();
    Ok((dot + bias) / norm)
}

/// Signed distance `(w·x + b) / ||w||`.
pub fn hyperplane_distance<T: Copy + Into<f64>>(probe: &PairProbe, x: &[T]) -> Result<f64> {
    probe.distance(x)
}

/// Downsamples the larger list to the size of the smaller one.
///
/// Selection is uniform without replacement and keeps the original order of
/// the retained items. Lists of equal length are returned unchanged.
pub fn balance_pair<T: Clone>(a: &[T], b: &[T], seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData(
            "cannot balance a pair with an empty class".into(),
        ));
    }
    let m = a.len().min(b.len());
    let mut rng = SeedKey::new(seed).str("balance").rng();
    let mut pick = |xs: &[T]| -> Vec<T> {
        if xs.len() == m {
            return xs.to_vec();
        }
        let mut idx = index::sample(&mut rng, xs.len(), m).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| xs[i].clone()).collect()
    };
    let out_a = pick(a);
    let out_b = pick(b);
    Ok((out_a, out_b))
}

/// Stratified split; each class contributes `round(frac * n_c)` test rows,
/// clamped so both train and test keep at least one row of every class.
pub fn stratified_split(y: &[bool], test_fraction: f64, seed: u64) -> Result<Split> {
    let mut rng = SeedKey::new(seed).str("split").rng();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        if idx.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "class {} has {} samples; at least 2 required",
                u8::from(class),
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n_test = ((idx.len() as f64 * test_fraction).round() as usize).clamp(1, idx.len() - 1);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

fn accuracy(margins: &[f64], y: &[bool], rows: &[usize]) -> f64 {
    let hits = rows.iter().filter(|&&i| (margins[i] > 0.0) == y[i]).count();
    hits as f64 / rows.len() as f64
}

/// Fits a probe with a precomputed split.
pub fn fit_with_split(
    x: &DMatrix<f64>,
    y: &[bool],
    split: &Split,
    config: &ProbeConfig,
) -> Result<ProbeFit> {
    let x_train = x.select_rows(&split.train);
    let y_train: Vec<bool> = split.train.iter().map(|&i| y[i]).collect();
    let fit = logistic::fit(&x_train, &y_train, &config.logistic, None)?;
    let norm = fit.weights.norm();
    let raw = fit.decision(x);
    let margins: Vec<f64> = if norm > 0.0 {
        raw.iter().map(|z| z / norm).collect()
    } else {
        raw.iter().copied().collect()
    };
    let n_true = y.iter().filter(|&&b| b).count();
    Ok(ProbeFit {
        weights: fit.weights.iter().copied().collect(),
        bias: fit.bias,
        train_accuracy: accuracy(&margins, y, &split.train),
        test_accuracy: accuracy(&margins, y, &split.test),
        margins,
        split: split.clone(),
        n_per_class: n_true.min(y.len() - n_true),
        split_seed: 0,
        converged: fit.converged,
        grad_norm: fit.grad_norm,
    })
}

/// Trains one probe with a seeded stratified split.
pub fn train_pair_probe(
    x: &DMatrix<f64>,
    y: &[bool],
    seed: u64,
    config: &ProbeConfig,
) -> Result<ProbeFit> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "probe labels".into(),
            expected: x.nrows(),
            found: y.len(),
        });
    }
    if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "probe features".into(),
            row: pos % x.nrows(),
            col: pos / x.nrows(),
        });
    }
    let split = stratified_split(y, config.test_fraction, seed)?;
    let mut fit = fit_with_split(x, y, &split, config)?;
    fit.split_seed = seed;
    Ok(fit)
}

/// Permutation significance of a probe's test accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub observed_accuracy: f64,
    pub null_accuracies: Vec<f64>,
    pub p_value: f64,
}

/// One-sided permutation p-value `(1 + #{null ≥ observed}) / (T + 1)`.
pub fn permutation_p_value(observed: f64, null: &[f64]) -> f64 {
    let hits = null.iter().filter(|&&v| v >= observed).count();
    (1 + hits) as f64 / (null.len() + 1) as f64
}

/// Shuffles `y`, reruns the split-and-fit protocol `n_perm` times and
/// compares the observed test accuracy against the resulting null.
pub fn accuracy_significance(
    x: &DMatrix<f64>,
    y: &[bool],
    n_perm: usize,
    seed: u64,
    config: &ProbeConfig,
) -> Result<SignificanceResult> {
    if n_perm == 0 {
        return Err(Error::invalid("n_perm must be at least 1"));
    }
    let observed = train_pair_probe(x, y, seed, config)?.test_accuracy;
    let null_accuracies = (0..n_perm)
        .into_par_iter()
        .map(|t| {
            let mut yp = y.to_vec();
            yp.shuffle(&mut replicate_rng(seed, "label-permutation", t));
            train_pair_probe(x, &yp, seed, config).map(|f| f.test_accuracy)
        })
        .collect::<Result<Vec<f64>>>()?;
    let p_value = permutation_p_value(observed, &null_accuracies);
    Ok(SignificanceResult {
        observed_accuracy: observed,
        null_accuracies,
        p_value,
    })
}

/// Unordered label pair, stored in label-set order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairKey {
    pub a: String,
    pub b: String,
}

impl PairKey {
    pub fn new(a: impl Into<String>, b: impl Into<String>) -> Self {
        PairKey {
            a: a.into(),
            b: b.into(),
        }
    }
}

/// Records used by one pair after balancing, with their split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSplit {
    pub label_a: String,
    pub label_b: String,
    pub split_seed: u64,
    pub n_per_class: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// Probes for every (pair, layer) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeGrid {
    pub labels: Vec<String>,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub probes: BTreeMap<(PairKey, usize), PairProbe>,
    pub splits: BTreeMap<PairKey, PairSplit>,
    /// Mean test accuracy over pairs present at each layer; `None` if no pair is present.
    pub mean_accuracy_by_layer: Vec<Option<f64>>,
    /// Cells that could not be trained, with the reason.
    pub absent: Vec<AbsentCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsentCell {
    pub label_a: String,
    pub label_b: String,
    pub layer: Option<usize>,
    pub reason: String,
}

impl ProbeGrid {
    /// Probe for the pair in either order, with `true` when the stored
    /// orientation is reversed relative to `(first, second)`.
    pub fn probe(&self, first: &str, second: &str, layer: usize) -> Option<(&PairProbe, bool)> {
        if let Some(p) = self.probes.get(&(PairKey::new(first, second), layer)) {
            return Some((p, false));
        }
        self.probes
            .get(&(PairKey::new(second, first), layer))
            .map(|p| (p, true))
    }

    pub fn split(&self, first: &str, second: &str) -> Option<&PairSplit> {
        self.splits
            .get(&PairKey::new(first, second))
            .or_else(|| self.splits.get(&PairKey::new(second, first)))
    }

    /// Unordered pairs in label-set order.
    pub fn pairs(&self) -> Vec<PairKey> {
        let mut out = Vec::new();
        for i in 0..self.labels.len() {
            for j in i + 1..self.labels.len() {
                out.push(PairKey::new(&self.labels[i], &self.labels[j]));
            }
        }
        out
    }

    /// Test accuracy of a pair across layers (`None` where absent).
    pub fn accuracy_profile(&self, first: &str, second: &str) -> Vec<Option<f64>> {
        (0..self.n_layers)
            .map(|l| self.probe(first, second, l).map(|(p, _)| p.test_accuracy))
            .collect()
    }

    fn recompute_means(&mut self) {
        let mut sums = vec![(0.0, 0usize); self.n_layers];
        for ((_, layer), p) in &self.probes {
            sums[*layer].0 += p.test_accuracy;
            sums[*layer].1 += 1;
        }
        self.mean_accuracy_by_layer = sums
            .into_iter()
            .map(|(s, c)| (c > 0).then(|| s / c as f64))
            .collect();
    }

    /// Layer with the highest mean accuracy (earliest on ties).
    pub fn peak_layer(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (l, acc) in self.mean_accuracy_by_layer.iter().enumerate() {
            if let Some(a) = acc {
                if best.is_none_or(|(_, b)| *a > b) {
                    best = Some((l, *a));
                }
            }
        }
        best.map(|(l, _)| l)
    }
}

/// Feature matrix (f64) for the given bundle rows at one layer.
pub fn layer_matrix(bundle: &ActivationBundle, layer: usize, rows: &[usize]) -> DMatrix<f64> {
    let d = bundle.hidden_dim;
    DMatrix::from_fn(rows.len(), d, |i, j| {
        f64::from(bundle.vector(layer, rows[i])[j])
    })
}

struct PairData {
    key: PairKey,
    rows: Vec<usize>,
    y: Vec<bool>,
    split: Split,
    seed: u64,
}

fn prepare_pair(
    bundle: &ActivationBundle,
    a: &str,
    b: &str,
    seed: u64,
    config: &ProbeConfig,
) -> std::result::Result<PairData, String> {
    let rows_of = |label: &str| -> Vec<usize> {
        bundle
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.correct && r.true_label == label)
            .map(|(i, _)| i)
            .collect()
    };
    let ra = rows_of(a);
    let rb = rows_of(b);
    let pair_seed = SeedKey::new(seed).str("pair").str(a).str(b).finish();
    let (ba, bb) = balance_pair(&ra, &rb, pair_seed).map_err(|e| e.to_string())?;
    if ba.len() < config.min_per_class {
        return Err(format!(
            "{} samples per class after balancing; at least {} required",
            ba.len(),
            config.min_per_class
        ));
    }
    let mut rows = ba.clone();
    rows.extend_from_slice(&bb);
    let mut y = vec![false; ba.len()];
    y.extend(std::iter::repeat_n(true, bb.len()));
    let split = stratified_split(&y, config.test_fraction, pair_seed).map_err(|e| e.to_string())?;
    Ok(PairData {
        key: PairKey::new(a, b),
        rows,
        y,
        split,
        seed: pair_seed,
    })
}

/// Trains one probe per unordered pair of `label_set.labels` per layer.
///
/// Failed cells are recorded in [`ProbeGrid::absent`] rather than aborting.
pub fn probe_grid(
    bundle: &ActivationBundle,
    label_set: &LabelSet,
    seed: u64,
    config: &ProbeConfig,
) -> Result<ProbeGrid> {
    let labels = label_set.labels.clone();
    if labels.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "probe grid needs at least 2 labels, got {}",
            labels.len()
        )));
    }
    let mut absent = Vec::new();
    let mut prepared = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            match prepare_pair(bundle, &labels[i], &labels[j], seed, config) {
                Ok(p) => prepared.push(p),
                Err(reason) => absent.push(AbsentCell {
                    label_a: labels[i].clone(),
                    label_b: labels[j].clone(),
                    layer: None,
                    reason,
                }),
            }
        }
    }

    let cells: Vec<(usize, usize)> = (0..prepared.len())
        .flat_map(|p| (0..bundle.n_layers).map(move |l| (p, l)))
        .collect();
    let fitted: Vec<(usize, usize, Result<ProbeFit>)> = cells
        .into_par_iter()
        .map(|(p, layer)| {
            let data = &prepared[p];
            let x = layer_matrix(bundle, layer, &data.rows);
            (p, layer, fit_with_split(&x, &data.y, &data.split, config))
        })
        .collect();

    let mut probes = BTreeMap::new();
    for (p, layer, fit) in fitted {
        let data = &prepared[p];
        match fit {
            Ok(fit) => {
                probes.insert(
                    (data.key.clone(), layer),
                    PairProbe {
                        label_a: data.key.a.clone(),
                        label_b: data.key.b.clone(),
                        layer,
                        weights: fit.weights,
                        bias: fit.bias,
                        train_accuracy: fit.train_accuracy,
                        test_accuracy: fit.test_accuracy,
                        n_per_class: fit.n_per_class,
                        split_seed: data.seed,
                        converged: fit.converged,
                        grad_norm: fit.grad_norm,
                    },
                );
            }
            Err(e) => absent.push(AbsentCell {
                label_a: data.key.a.clone(),
                label_b: data.key.b.clone(),
                layer: Some(layer),
                reason: e.to_string(),
            }),
        }
    }

    let ids = |idx: &[usize], rows: &[usize]| -> Vec<String> {
        idx.iter()
            .map(|&i| bundle.records[rows[i]].record_id.clone())
            .collect()
    };
    let splits = prepared
        .iter()
        .map(|d| {
            (
                d.key.clone(),
                PairSplit {
                    label_a: d.key.a.clone(),
                    label_b: d.key.b.clone(),
                    split_seed: d.seed,
                    n_per_class: d.rows.len() / 2,
                    train_ids: ids(&d.split.train, &d.rows),
                    test_ids: ids(&d.split.test, &d.rows),
                },
            )
        })
        .collect();

    let mut grid = ProbeGrid {
        labels,
        n_layers: bundle.n_layers,
        hidden_dim: bundle.hidden_dim,
        probes,
        splits,
        mean_accuracy_by_layer: Vec::new(),
        absent,
    };
    grid.recompute_means();
    Ok(grid)
}

/// Label-permutation significance for every pair at one layer.
pub fn grid_significance(
    bundle: &ActivationBundle,
    grid: &ProbeGrid,
    layer: usize,
    n_perm: usize,
    seed: u64,
    config: &ProbeConfig,
) -> Result<BTreeMap<PairKey, SignificanceResult>> {
    let mut out = BTreeMap::new();
    for key in grid.pairs() {
        let Ok(data) = prepare_pair(bundle, &key.a, &key.b, seed, config) else {
            continue;
        };
        let x = layer_matrix(bundle, layer, &data.rows);
        let sig_seed = SeedKey::new(data.seed).int(layer as u64).finish();
        out.insert(
            key,
            accuracy_significance(&x, &data.y, n_perm, sig_seed, config)?,
        );
    }
    Ok(out)
}

pub const GRID_INDEX_FILE: &str = "index.json";

#[derive(Serialize, Deserialize)]
struct GridIndex {
    labels: Vec<String>,
    n_layers: usize,
    hidden_dim: usize,
    mean_accuracy_by_layer: Vec<Option<f64>>,
    probes: Vec<IndexedProbe>,
    splits: Vec<PairSplit>,
    absent: Vec<AbsentCell>,
}

#[derive(Serialize, Deserialize)]
struct IndexedProbe {
    #[serde(flatten)]
    probe: PairProbe,
    weights_file: String,
}

fn weights_file_name(ordinal: usize, p: &PairProbe) -> String {
    format!("probe_{ordinal:05}_layer_{}.f32", p.layer)
}

/// Writes `index.json` plus one float32 weight file per probe under `dir/weights/`.
pub fn save_grid(grid: &ProbeGrid, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let wdir = dir.join("weights");
    fs::create_dir_all(&wdir).map_err(|e| Error::io(&wdir, e))?;
    let mut probes = Vec::with_capacity(grid.probes.len());
    for (ordinal, p) in grid.probes.values().enumerate() {
        let name = weights_file_name(ordinal, p);
        let f32s: Vec<f32> = p.weights.iter().map(|&w| w as f32).collect();
        let path = wdir.join(&name);
        fs::write(&path, encode_f32(&f32s)).map_err(|e| Error::io(&path, e))?;
        probes.push(IndexedProbe {
            probe: p.clone(),
            weights_file: format!("weights/{name}"),
        });
    }
    let index = GridIndex {
        labels: grid.labels.clone(),
        n_layers: grid.n_layers,
        hidden_dim: grid.hidden_dim,
        mean_accuracy_by_layer: grid.mean_accuracy_by_layer.clone(),
        probes,
        splits: grid.splits.values().cloned().collect(),
        absent: grid.absent.clone(),
    };
    let path = dir.join(GRID_INDEX_FILE);
    let mut json = serde_json::to_string_pretty(&index)?;
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Reads a grid written by [`save_grid`]. Weights come back float32-rounded.
pub fn load_grid(dir: impl AsRef<Path>) -> Result<ProbeGrid> {
    let dir = dir.as_ref();
    let path = dir.join(GRID_INDEX_FILE);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: GridIndex = serde_json::from_str(&text)?;
    let mut probes = BTreeMap::new();
    for ip in index.probes {
        let wpath = dir.join(&ip.weights_file);
        if !wpath.is_file() {
            return Err(Error::MissingFile(wpath));
        }
        let bytes = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
        if bytes.len() != index.hidden_dim * 4 {
            return Err(Error::DimensionMismatch {
                context: wpath.display().to_string(),
                expected: index.hidden_dim,
                found: bytes.len() / 4,
            });
        }
        let mut p = ip.probe;
        p.weights = decode_f32(&bytes).into_iter().map(f64::from).collect();
        probes.insert((PairKey::new(&p.label_a, &p.label_b), p.layer), p);
    }
    Ok(ProbeGrid {
        labels: index.labels,
        n_layers: index.n_layers,
        hidden_dim: index.hidden_dim,
        probes,
        splits: index
            .splits
            .into_iter()
            .map(|s| (PairKey::new(&s.label_a, &s.label_b), s))
            .collect(),
        mean_accuracy_by_layer: index.mean_accuracy_by_layer,
        absent: index.absent,
    })
}

/// CSV table `label_a,label_b,layer,train_accuracy,test_accuracy,n_per_class`.
pub fn accuracy_table_csv(grid: &ProbeGrid) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "label_a",
        "label_b",
        "layer",
        "train_accuracy",
        "test_accuracy",
        "n_per_class",
    ])?;
    for p in grid.probes.values() {
        w.write_record([
            p.label_a.clone(),
            p.label_b.clone(),
            p.layer.to_string(),
            p.train_accuracy.to_string(),
            p.test_accuracy.to_string(),
            p.n_per_class.to_string(),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::invalid(format!("csv flush: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
