//! Classical MDS, Isomap and their diagnostics.

mod elbow;
mod geodesic;
mod isomap;
mod mds;
mod spectrum;
mod trust;

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub use elbow::{residual_variance, residual_variance_elbow, Elbow, ElbowMethod};
pub use geodesic::{
    geodesic_euclidean_ratios, knn_geodesics, knn_graph, nearest_rank_percentile,
    GeodesicDiagnostics, PercentileValue,
};
pub use isomap::{default_sweep, isomap, IsomapOptions, NeighborChoice, REPORTED_PERCENTILES};
pub use mds::{classical_mds, double_center, gram_spectrum, GramSpectrum};
pub use spectrum::{
    eigengap_ratios, negative_mass_fraction, participation_ratio, shuffle_off_diagonal,
    spectrum_diagnostics, SpectrumDiagnostics,
};
pub use trust::{default_trust_k, trustworthiness, valid_trust_ks};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mds,
    Isomap,
}

/// Low-rank coordinates plus spectrum and quality diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingResult {
    pub labels: Vec<String>,
    /// n x k, columns ordered by descending eigenvalue.
    pub coords: DMatrix<f64>,
    /// Full unclamped spectrum of the Gram matrix, descending (length n).
    pub eigenvalues: Vec<f64>,
    pub method: Method,
    pub rank: usize,
    /// Neighbor count of the kNN graph (Isomap only).
    pub k_neighbors: Option<usize>,
    /// Trustworthiness w.r.t. the input dissimilarities, per valid neighbor count.
    pub trustworthiness_by_k: BTreeMap<usize, f64>,
    /// Residual variance at ranks 1..n-1 (index 0 = rank 1).
    pub residual_variance_by_rank: Vec<f64>,
    pub geodesic: Option<GeodesicDiagnostics>,
    pub warnings: Vec<String>,
}

impl EmbeddingResult {
    /// Euclidean distances between embedded points.
    pub fn distance_matrix(&self) -> DMatrix<f64> {
        pairwise_distances(&self.coords)
    }

    /// Trustworthiness at [`default_trust_k`].
    pub fn trustworthiness(&self) -> Option<f64> {
        default_trust_k(self.labels.len()).and_then(|k| self.trustworthiness_by_k.get(&k).copied())
    }
}

pub(crate) fn pairwise_distances(coords: &DMatrix<f64>) -> DMatrix<f64> {
    let n = coords.nrows();
    DMatrix::from_fn(n, n, |i, j| (coords.row(i) - coords.row(j)).norm())
}

#[derive(Serialize, Deserialize)]
struct EmbeddingFile {
    labels: Vec<String>,
    method: Method,
    rank: usize,
    k_neighbors: Option<usize>,
    coords: Vec<Vec<f64>>,
    eigenvalues: Vec<f64>,
    trustworthiness_by_k: BTreeMap<usize, f64>,
    residual_variance_by_rank: Vec<f64>,
    geodesic: Option<GeodesicDiagnostics>,
    spectrum: Option<SpectrumDiagnostics>,
    warnings: Vec<String>,
}

/// JSON export; `spectrum` diagnostics are attached when available.
pub fn to_json(result: &EmbeddingResult, spectrum: Option<&SpectrumDiagnostics>) -> Result<String> {
    let file = EmbeddingFile {
        labels: result.labels.clone(),
        method: result.method,
        rank: result.rank,
        k_neighbors: result.k_neighbors,
        coords: result
            .coords
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect(),
        eigenvalues: result.eigenvalues.clone(),
        trustworthiness_by_k: result.trustworthiness_by_k.clone(),
        residual_variance_by_rank: result.residual_variance_by_rank.clone(),
        geodesic: result.geodesic.clone(),
        spectrum: spectrum.cloned(),
        warnings: result.warnings.clone(),
    };
    let mut s = serde_json::to_string_pretty(&file)?;
    s.push('\n');
    Ok(s)
}

/// CSV `label,x1..xk`.
pub fn to_csv(result: &EmbeddingResult) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["label".to_string()];
    header.extend((1..=result.coords.ncols()).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for (i, label) in result.labels.iter().enumerate() {
        let mut row = vec![label.clone()];
        row.extend(result.coords.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| crate::error::Error::invalid(format!("csv flush: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Labels and coordinates read back from an embedding CSV or JSON export.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPoints {
    pub labels: Vec<String>,
    pub coords: Vec<Vec<f64>>,
}

pub fn parse_embedding(text: &str) -> Result<EmbeddingPoints> {
    use crate::error::Error;
    if text.trim_start().starts_with('{') {
        let f: EmbeddingFile = serde_json::from_str(text)?;
        if f.coords.len() != f.labels.len() {
            return Err(Error::DimensionMismatch {
                context: "embedding coords".into(),
                expected: f.labels.len(),
                found: f.coords.len(),
            });
        }
        return Ok(EmbeddingPoints {
            labels: f.labels,
            coords: f.coords,
        });
    }
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let width = reader.headers()?.len();
    if width < 2 {
        return Err(Error::invalid("embedding csv needs a label and at least one coordinate"));
    }
    let mut labels = Vec::new();
    let mut coords = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        labels.push(rec[0].to_string());
        let row = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::invalid(format!("embedding row {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        coords.push(row);
    }
    Ok(EmbeddingPoints { labels, coords })
}
