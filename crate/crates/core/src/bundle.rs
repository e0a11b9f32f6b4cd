//! Activation bundles: pooled per-layer activation vectors plus record metadata.
//!
//! On disk a bundle is a directory:
//!
//! ```text
//! manifest.json   {model_name, n_layers, hidden_dim, records: [...]}
//! layer_0.f32     n_records * hidden_dim float32, little-endian, row-major
//! layer_1.f32
//! ...
//! ```
//!
//! Row order in every layer file is the manifest record order.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn layer_file_name(layer: usize) -> String {
    format!("layer_{layer}.f32")
}

/// Metadata for one pooled activation row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub record_id: String,
    pub text_id: String,
    pub true_label: String,
    pub predicted_label: Option<String>,
    pub correct: bool,
}

impl ActivationRecord {
    /// Record whose prediction matches its label.
    pub fn correct(record_id: impl Into<String>, label: impl Into<String>) -> Self {
        let label = label.into();
        let record_id = record_id.into();
        ActivationRecord {
            text_id: record_id.clone(),
            record_id,
            predicted_label: Some(label.clone()),
            true_label: label,
            correct: true,
        }
    }

    /// Record misclassified as `predicted`.
    pub fn misclassified(
        record_id: impl Into<String>,
        true_label: impl Into<String>,
        predicted: impl Into<String>,
    ) -> Self {
        let record_id = record_id.into();
        let true_label = true_label.into();
        let predicted = predicted.into();
        let correct = true_label == predicted;
        ActivationRecord {
            text_id: record_id.clone(),
            record_id,
            true_label,
            predicted_label: Some(predicted),
            correct,
        }
    }
}

/// Per-layer matrices of pooled activations with record metadata.
///
/// Layer matrices are stored row-major, one `Vec<f32>` of length
/// `records.len() * hidden_dim` per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBundle {
    pub model_name: String,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub records: Vec<ActivationRecord>,
    pub layer_matrices: Vec<Vec<f32>>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    model_name: String,
    n_layers: usize,
    hidden_dim: usize,
    records: Vec<ActivationRecord>,
}

impl ActivationBundle {
    /// Builds a bundle and runs the full validation pass.
    pub fn new(
        model_name: impl Into<String>,
        hidden_dim: usize,
        records: Vec<ActivationRecord>,
        layer_matrices: Vec<Vec<f32>>,
    ) -> Result<Self> {
        let bundle = ActivationBundle {
            model_name: model_name.into(),
            n_layers: layer_matrices.len(),
            hidden_dim,
            records,
            layer_matrices,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn n_records(&self) -> usize {
        self.records.len()
    }

    /// Activation row `row` at `layer`.
    pub fn vector(&self, layer: usize, row: usize) -> &[f32] {
        let d = self.hidden_dim;
        &self.layer_matrices[layer][row * d..(row + 1) * d]
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::invalid("bundle must have at least one layer"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::invalid("hidden_dim must be at least 1"));
        }
        if self.layer_matrices.len() != self.n_layers {
            return Err(Error::DimensionMismatch {
                context: "layer count".into(),
                expected: self.n_layers,
                found: self.layer_matrices.len(),
            });
        }
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !seen.insert(r.record_id.as_str()) {
                return Err(Error::DuplicateRecordId(r.record_id.clone()));
            }
            if let Some(pred) = &r.predicted_label {
                if r.correct != (*pred == r.true_label) {
                    return Err(Error::invalid(format!(
                        "record `{}`: correct={} disagrees with true_label `{}` / predicted_label `{}`",
                        r.record_id, r.correct, r.true_label, pred
                    )));
                }
            }
        }
        let expected = self.records.len() * self.hidden_dim;
        for (layer, m) in self.layer_matrices.iter().enumerate() {
            if m.len() != expected {
                return Err(Error::DimensionMismatch {
                    context: format!("layer {layer} values"),
                    expected,
                    found: m.len(),
                });
            }
            if let Some(pos) = m.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("layer {layer}"),
                    row: pos / self.hidden_dim,
                    col: pos % self.hidden_dim,
                });
            }
        }
        Ok(())
    }
}

/// Loads and validates a bundle directory.
pub fn load_bundle(path: impl AsRef<Path>) -> Result<ActivationBundle> {
    let dir = path.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::MissingFile(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.n_layers == 0 {
        return Err(Error::invalid("manifest declares n_layers = 0"));
    }
    if manifest.hidden_dim == 0 {
        return Err(Error::invalid("manifest declares hidden_dim = 0"));
    }

    let expected_bytes = manifest.records.len() * manifest.hidden_dim * 4;
    let mut layer_matrices = Vec::with_capacity(manifest.n_layers);
    for layer in 0..manifest.n_layers {
        let file = dir.join(layer_file_name(layer));
        if !file.is_file() {
            return Err(Error::MissingFile(file));
        }
        let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        if bytes.len() != expected_bytes {
            return Err(Error::DimensionMismatch {
                context: format!(
                    "{} ({} records x {} dims)",
                    file.display(),
                    manifest.records.len(),
                    manifest.hidden_dim
                ),
                expected: expected_bytes / 4,
                found: bytes.len() / 4,
            });
        }
        layer_matrices.push(decode_f32(&bytes));
    }

    let bundle = ActivationBundle {
        model_name: manifest.model_name,
        n_layers: manifest.n_layers,
        hidden_dim: manifest.hidden_dim,
        records: manifest.records,
        layer_matrices,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes a bundle directory, overwriting any previous bundle at `path`.
pub fn save_bundle(bundle: &ActivationBundle, path: impl AsRef<Path>) -> Result<()> {
    bundle.validate()?;
    let dir = path.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let manifest = Manifest {
        model_name: bundle.model_name.clone(),
        n_layers: bundle.n_layers,
        hidden_dim: bundle.hidden_dim,
        records: bundle.records.clone(),
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;

    for (layer, m) in bundle.layer_matrices.iter().enumerate() {
        let file = dir.join(layer_file_name(layer));
        fs::write(&file, encode_f32(m)).map_err(|e| Error::io(&file, e))?;
    }
    // Stale layers from a deeper bundle previously written here.
    let mut layer = bundle.n_layers;
    loop {
        let stale: PathBuf = dir.join(layer_file_name(layer));
        if !stale.is_file() {
            break;
        }
        fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
        layer += 1;
    }
    Ok(())
}

pub fn encode_f32(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Record counts for one label.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub correct: usize,
    pub incorrect: usize,
}

impl LabelCounts {
    pub fn total(&self) -> usize {
        self.correct + self.incorrect
    }
}

/// Labels retained for analysis plus counts for every label in the bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    /// Retained labels, in order of first appearance in the bundle.
    pub labels: Vec<String>,
    /// Counts for every label in the bundle (retained or not); totals sum to n_records.
    pub counts: Vec<(String, LabelCounts)>,
}

impl LabelSet {
    pub fn count(&self, label: &str) -> Option<LabelCounts> {
        self.counts
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, c)| *c)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }
}

/// Keeps labels that have at least `min_correct` correctly classified records.
pub fn filter_labels(bundle: &ActivationBundle, min_correct: usize) -> LabelSet {
    let mut order: Vec<String> = Vec::new();
    let mut counts: HashMap<&str, LabelCounts> = HashMap::new();
    for r in &bundle.records {
        let entry = counts.entry(r.true_label.as_str()).or_insert_with(|| {
            order.push(r.true_label.clone());
            LabelCounts::default()
        });
        if r.correct {
            entry.correct += 1;
        } else {
            entry.incorrect += 1;
        }
    }
    let counts: Vec<(String, LabelCounts)> = order
        .into_iter()
        .map(|l| {
            let c = counts[l.as_str()];
            (l, c)
        })
        .collect();
    let labels = counts
        .iter()
        .filter(|(_, c)| c.correct >= min_correct)
        .map(|(l, _)| l.clone())
        .collect();
    LabelSet { labels, counts }
}
