//! Symmetric dissimilarity matrices over labels.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bundle::{ActivationBundle, LabelSet};
use crate::error::{Error, Result};
use crate::probe::{PairKey, ProbeGrid, SignificanceResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    AffineAccuracy,
    Cosine,
    SignificanceGated,
    /// Euclidean distance between given points (fixtures and ground-truth geometry).
    Euclidean,
    /// Loaded from a file without provenance.
    External,
}

/// How probe accuracies are turned into dissimilarities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyMapping {
    /// `D = acc`
    Accuracy,
    /// `D = max(0, 2 acc - 1)`
    AffineAccuracy,
}

impl AccuracyMapping {
    pub fn apply(self, acc: f64) -> f64 {
        match self {
            AccuracyMapping::Accuracy => acc,
            AccuracyMapping::AffineAccuracy => (2.0 * acc - 1.0).max(0.0),
        }
    }

    fn metric(self) -> Metric {
        match self {
            AccuracyMapping::Accuracy => Metric::Accuracy,
            AccuracyMapping::AffineAccuracy => Metric::AffineAccuracy,
        }
    }
}

/// Symmetric, zero-diagonal dissimilarity matrix with imputation bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct DissimilarityMatrix {
    pub labels: Vec<String>,
    pub values: DMatrix<f64>,
    pub metric: Metric,
    pub layer: Option<usize>,
    /// `true` where the entry was imputed.
    pub missing: DMatrix<bool>,
    pub warnings: Vec<String>,
}

impl DissimilarityMatrix {
    /// Wraps a complete matrix; symmetrizes and zeroes the diagonal.
    pub fn from_matrix(labels: Vec<String>, values: DMatrix<f64>, metric: Metric) -> Result<Self> {
        let n = labels.len();
        if values.nrows() != n || values.ncols() != n {
            return Err(Error::DimensionMismatch {
                context: "dissimilarity matrix".into(),
                expected: n,
                found: values.nrows().max(values.ncols()),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "dissimilarity matrix".into(),
                row: pos % n,
                col: pos / n,
            });
        }
        let mut m = DissimilarityMatrix {
            labels,
            values,
            metric,
            layer: None,
            missing: DMatrix::from_element(n, n, false),
            warnings: Vec::new(),
        };
        m.symmetrize();
        Ok(m)
    }

    /// Euclidean distances between the rows of `points`.
    pub fn from_points(labels: Vec<String>, points: &DMatrix<f64>) -> Result<Self> {
        let n = points.nrows();
        let values = DMatrix::from_fn(n, n, |i, j| (points.row(i) - points.row(j)).norm());
        Self::from_matrix(labels, values, Metric::Euclidean)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn symmetrize(&mut self) {
        let n = self.len();
        for i in 0..n {
            self.values[(i, i)] = 0.0;
            self.missing[(i, i)] = false;
            for j in i + 1..n {
                let v = 0.5 * (self.values[(i, j)] + self.values[(j, i)]);
                self.values[(i, j)] = v;
                self.values[(j, i)] = v;
                let miss = self.missing[(i, j)] || self.missing[(j, i)];
                self.missing[(i, j)] = miss;
                self.missing[(j, i)] = miss;
            }
        }
    }

    /// Replaces missing off-diagonal entries with the mean of present ones.
    fn impute(&mut self) {
        let n = self.len();
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            for j in i + 1..n {
                if !self.missing[(i, j)] {
                    sum += self.values[(i, j)];
                    count += 1;
                }
            }
        }
        let any_missing = (0..n).any(|i| (i + 1..n).any(|j| self.missing[(i, j)]));
        if !any_missing {
            return;
        }
        let fill = if count > 0 {
            sum / count as f64
        } else {
            self.warnings
                .push("no present off-diagonal entries; matrix set to zero".into());
            0.0
        };
        for i in 0..n {
            for j in 0..n {
                if i != j && self.missing[(i, j)] {
                    self.values[(i, j)] = fill;
                }
            }
        }
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn n_missing_pairs(&self) -> usize {
        let n = self.len();
        (0..n)
            .map(|i| (i + 1..n).filter(|&j| self.missing[(i, j)]).count())
            .sum()
    }
}

/// Dissimilarities from probe test accuracies at `layer`.
pub fn from_accuracy(
    grid: &ProbeGrid,
    layer: usize,
    mapping: AccuracyMapping,
) -> Result<DissimilarityMatrix> {
    if layer >= grid.n_layers {
        return Err(Error::invalid(format!(
            "layer {layer} out of range (grid has {} layers)",
            grid.n_layers
        )));
    }
    let n = grid.labels.len();
    let mut values = DMatrix::zeros(n, n);
    let mut missing = DMatrix::from_element(n, n, false);
    let mut present = 0;
    for i in 0..n {
        for j in i + 1..n {
            match grid.probe(&grid.labels[i], &grid.labels[j], layer) {
                Some((p, _)) => {
                    let v = mapping.apply(p.test_accuracy);
                    values[(i, j)] = v;
                    values[(j, i)] = v;
                    present += 1;
                }
                None => {
                    missing[(i, j)] = true;
                    missing[(j, i)] = true;
                }
            }
        }
    }
    // A grid with no probes at all degrades to the all-imputed matrix instead.
    if present == 0 && n > 1 && !grid.probes.is_empty() {
        return Err(Error::InsufficientData(format!("no probes at layer {layer}")));
    }
    let mut m = DissimilarityMatrix {
        labels: grid.labels.clone(),
        values,
        metric: mapping.metric(),
        layer: Some(layer),
        missing,
        warnings: Vec::new(),
    };
    m.impute();
    m.symmetrize();
    Ok(m)
}

/// `1 - cos` between per-label mean vectors of correctly classified records.
pub fn from_cosine(
    bundle: &ActivationBundle,
    label_set: &LabelSet,
    layer: usize,
) -> Result<DissimilarityMatrix> {
    if layer >= bundle.n_layers {
        return Err(Error::invalid(format!(
            "layer {layer} out of range (bundle has {} layers)",
            bundle.n_layers
        )));
    }
    let d = bundle.hidden_dim;
    let mut means = Vec::with_capacity(label_set.labels.len());
    for label in &label_set.labels {
        let mut sum = vec![0.0f64; d];
        let mut count = 0usize;
        for (row, r) in bundle.records.iter().enumerate() {
            if r.correct && &r.true_label == label {
                for (s, &v) in sum.iter_mut().zip(bundle.vector(layer, row)) {
                    *s += f64::from(v);
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::InsufficientData(format!(
                "label `{label}` has no correct records"
            )));
        }
        let mean: Vec<f64> = sum.into_iter().map(|s| s / count as f64).collect();
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Degenerate(format!(
                "mean activation of `{label}` has zero norm"
            )));
        }
        means.push(mean.into_iter().map(|v| v / norm).collect::<Vec<f64>>());
    }
    let n = means.len();
    let values = DMatrix::from_fn(n, n, |i, j| {
        let cos: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| a * b).sum();
        1.0 - cos.clamp(-1.0, 1.0)
    });
    let mut m = DissimilarityMatrix::from_matrix(label_set.labels.clone(), values, Metric::Cosine)?;
    m.layer = Some(layer);
    Ok(m)
}

/// Marks pairs whose permutation p-value is `>= alpha` as missing and re-imputes.
///
/// Pairs absent from `sig` are left untouched.
pub fn gate_by_significance(
    d: &DissimilarityMatrix,
    sig: &BTreeMap<PairKey, SignificanceResult>,
    alpha: f64,
) -> Result<DissimilarityMatrix> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let mut out = d.clone();
    let mut changed = false;
    for (key, s) in sig {
        let (Some(i), Some(j)) = (d.index_of(&key.a), d.index_of(&key.b)) else {
            continue;
        };
        if s.p_value >= alpha && !out.missing[(i, j)] {
            out.missing[(i, j)] = true;
            out.missing[(j, i)] = true;
            changed = true;
        }
    }
    out.metric = Metric::SignificanceGated;
    if changed {
        // Earlier imputations are recomputed from the surviving entries.
        out.impute();
        out.symmetrize();
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct MatrixFile {
    labels: Vec<String>,
    metric: Metric,
    layer: Option<usize>,
    values: Vec<Vec<f64>>,
    missing: Vec<Vec<bool>>,
    #[serde(default)]
    warnings: Vec<String>,
}

pub fn to_json(d: &DissimilarityMatrix) -> Result<String> {
    let n = d.len();
    let file = MatrixFile {
        labels: d.labels.clone(),
        metric: d.metric,
        layer: d.layer,
        values: (0..n)
            .map(|i| (0..n).map(|j| d.values[(i, j)]).collect())
            .collect(),
        missing: (0..n)
            .map(|i| (0..n).map(|j| d.missing[(i, j)]).collect())
            .collect(),
        warnings: d.warnings.clone(),
    };
    let mut s = serde_json::to_string_pretty(&file)?;
    s.push('\n');
    Ok(s)
}

/// CSV with a `label` header cell, the labels as column headers and one row per label.
pub fn to_csv(d: &DissimilarityMatrix) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["label".to_string()];
    header.extend(d.labels.iter().cloned());
    w.write_record(&header)?;
    for (i, label) in d.labels.iter().enumerate() {
        let mut row = vec![label.clone()];
        row.extend((0..d.len()).map(|j| d.values[(i, j)].to_string()));
        w.write_record(&row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::invalid(format!("csv flush: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Parses either export format (JSON object or CSV).
pub fn parse_matrix(text: &str) -> Result<DissimilarityMatrix> {
    if text.trim_start().starts_with('{') {
        let f: MatrixFile = serde_json::from_str(text)?;
        let n = f.labels.len();
        if f.values.len() != n || f.values.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch {
                context: "matrix json values".into(),
                expected: n,
                found: f.values.len(),
            });
        }
        let values = DMatrix::from_fn(n, n, |i, j| f.values[i][j]);
        let mut m = DissimilarityMatrix::from_matrix(f.labels, values, f.metric)?;
        if f.missing.len() == n && f.missing.iter().all(|r| r.len() == n) {
            m.missing = DMatrix::from_fn(n, n, |i, j| f.missing[i][j]);
        }
        m.layer = f.layer;
        m.warnings = f.warnings;
        return Ok(m);
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let labels: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let n = labels.len();
    let mut values = DMatrix::zeros(n, n);
    let mut rows = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        if i >= n {
            return Err(Error::DimensionMismatch {
                context: "matrix csv rows".into(),
                expected: n,
                found: i + 1,
            });
        }
        if rec.len() != n + 1 {
            return Err(Error::DimensionMismatch {
                context: format!("matrix csv row {}", i + 1),
                expected: n + 1,
                found: rec.len(),
            });
        }
        if &rec[0] != labels[i].as_str() {
            return Err(Error::invalid(format!(
                "row {} label `{}` does not match column label `{}`",
                i + 1,
                &rec[0],
                labels[i]
            )));
        }
        for j in 0..n {
            values[(i, j)] = rec[j + 1].trim().parse::<f64>().map_err(|e| {
                Error::invalid(format!("row {}, column {}: {e}", i + 1, j + 1))
            })?;
        }
        rows += 1;
    }
    if rows != n {
        return Err(Error::DimensionMismatch {
            context: "matrix csv rows".into(),
            expected: n,
            found: rows,
        });
    }
    DissimilarityMatrix::from_matrix(labels, values, Metric::External)
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<DissimilarityMatrix> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix(&text)
}
