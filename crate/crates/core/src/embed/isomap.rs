use serde::{Deserialize, Serialize};

use super::mds::{check_symmetric, embed_from_spectrum, gram_spectrum};
use super::trust::{default_trust_k, trustworthiness};
use super::{geodesic_euclidean_ratios, knn_geodesics, EmbeddingResult, Method};
use crate::dissim::DissimilarityMatrix;
use crate::error::{Error, Result};

/// Percentiles attached to the geodesic diagnostics of every Isomap result.
pub const REPORTED_PERCENTILES: [f64; 3] = [10.0, 50.0, 90.0];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborChoice {
    Fixed(usize),
    /// Sweep [`default_sweep`].
    Auto,
    /// Sweep the given values.
    Sweep(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsomapOptions {
    pub rank: usize,
    pub neighbors: NeighborChoice,
}

/// `3..=min(12, n-2)`, or every valid count when that range is empty.
pub fn default_sweep(n: usize) -> Vec<usize> {
    let hi = 12.min(n.saturating_sub(2));
    if hi >= 3 {
        (3..=hi).collect()
    } else {
        (1..n).collect()
    }
}

fn embed_with(d: &DissimilarityMatrix, rank: usize, k_neighbors: usize) -> Result<EmbeddingResult> {
    let (g, diag) = knn_geodesics(d, k_neighbors)?;
    let spectrum = gram_spectrum(&g);
    let mut result = embed_from_spectrum(d.labels.clone(), &d.values, &g, spectrum, rank, Method::Isomap);
    result.k_neighbors = Some(k_neighbors);
    result.warnings.extend(diag.warnings.iter().cloned());
    let mut full = geodesic_euclidean_ratios(d, k_neighbors, &REPORTED_PERCENTILES)?;
    full.warnings.retain(|w| !diag.warnings.contains(w));
    result.warnings.extend(full.warnings.iter().cloned());
    result.geodesic = Some(full);
    Ok(result)
}

/// Classical MDS on kNN-graph geodesics.
///
/// A sweep keeps the neighbor count with the highest trustworthiness of the
/// rank-`rank` embedding (smallest count on ties).
pub fn isomap(d: &DissimilarityMatrix, opts: &IsomapOptions) -> Result<EmbeddingResult> {
    let n = d.len();
    let rank = opts.rank;
    if n < 2 || rank == 0 || rank > n - 1 {
        return Err(Error::invalid(format!(
            "rank must satisfy 1 <= k <= n-1 (k = {rank}, n = {n})"
        )));
    }
    check_symmetric(&d.values)?;
    let sweep = match &opts.neighbors {
        NeighborChoice::Fixed(k) => return embed_with(d, rank, *k),
        NeighborChoice::Auto => default_sweep(n),
        NeighborChoice::Sweep(ks) => ks.clone(),
    };
    if sweep.is_empty() {
        return Err(Error::invalid("empty k_neighbors sweep"));
    }
    let Some(tk) = default_trust_k(n) else {
        return embed_with(d, rank, sweep[0]);
    };
    let mut best: Option<(f64, EmbeddingResult)> = None;
    for &k in &sweep {
        let r = embed_with(d, rank, k)?;
        let t = trustworthiness(&d.values, &r.coords, tk)?;
        if best.as_ref().is_none_or(|(bt, _)| t > *bt) {
            best = Some((t, r));
        }
    }
    let (_, result) = best.expect("non-empty sweep");
    Ok(result)
}
