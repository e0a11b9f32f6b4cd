use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};

use super::{elbow, trust, EmbeddingResult, Method};
use crate::dissim::DissimilarityMatrix;
use crate::error::{Error, Result};

/// `B = -1/2 J D∘D J` with `J = I - 11ᵀ/n`.
pub fn double_center(d: &DMatrix<f64>) -> DMatrix<f64> {
    let n = d.nrows();
    let sq = d.map(|v| v * v);
    let row_means: Vec<f64> = (0..n).map(|i| sq.row(i).sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    let mut b = DMatrix::from_fn(n, n, |i, j| {
        -0.5 * (sq[(i, j)] - row_means[i] - row_means[j] + grand)
    });
    // exact symmetry regardless of rounding order
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (b[(i, j)] + b[(j, i)]);
            b[(i, j)] = v;
            b[(j, i)] = v;
        }
    }
    b
}

/// Eigendecomposition of the double-centered Gram matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GramSpectrum {
    /// Descending, unclamped.
    pub eigenvalues: Vec<f64>,
    /// Column `c` pairs with `eigenvalues[c]`; largest-magnitude component nonnegative.
    pub eigenvectors: DMatrix<f64>,
}

impl GramSpectrum {
    /// `coords_i = q_i * sqrt(max(λ, 0))` for the leading `k` eigenpairs.
    pub fn coords(&self, k: usize) -> DMatrix<f64> {
        let n = self.eigenvectors.nrows();
        DMatrix::from_fn(n, k, |i, c| {
            self.eigenvectors[(i, c)] * self.eigenvalues[c].max(0.0).sqrt()
        })
    }
}

pub(crate) fn check_symmetric(d: &DMatrix<f64>) -> Result<()> {
    let n = d.nrows();
    if d.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "dissimilarity matrix (square)".into(),
            expected: n,
            found: d.ncols(),
        });
    }
    let scale = d.amax().max(1.0);
    for i in 0..n {
        for j in i + 1..n {
            if (d[(i, j)] - d[(j, i)]).abs() > 1e-9 * scale {
                return Err(Error::invalid(format!(
                    "dissimilarity matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

pub fn gram_spectrum(d: &DMatrix<f64>) -> GramSpectrum {
    let b = double_center(d);
    let n = b.nrows();
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| {
        eig.eigenvalues[y]
            .partial_cmp(&eig.eigenvalues[x])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(x.cmp(&y))
    });
    let eigenvalues = order.iter().map(|&c| eig.eigenvalues[c]).collect();
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        // sign convention: largest |component| (first on ties) is nonnegative
        let mut pivot = 0;
        for i in 1..n {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        eigenvectors.set_column(dst, &(col * sign));
    }
    GramSpectrum {
        eigenvalues,
        eigenvectors,
    }
}

pub(crate) fn embed_from_spectrum(
    labels: Vec<String>,
    original: &DMatrix<f64>,
    target: &DMatrix<f64>,
    spectrum: GramSpectrum,
    k: usize,
    method: Method,
) -> EmbeddingResult {
    let n = labels.len();
    let coords = spectrum.coords(k);
    let mut trustworthiness_by_k = BTreeMap::new();
    for tk in trust::valid_trust_ks(n) {
        if let Ok(t) = trust::trustworthiness(original, &coords, tk) {
            trustworthiness_by_k.insert(tk, t);
        }
    }
    let residual_variance_by_rank = (1..n)
        .map(|r| elbow::residual_variance(target, &spectrum.coords(r)).unwrap_or(1.0))
        .collect();
    EmbeddingResult {
        labels,
        coords,
        eigenvalues: spectrum.eigenvalues,
        method,
        rank: k,
        k_neighbors: None,
        trustworthiness_by_k,
        residual_variance_by_rank,
        geodesic: None,
        warnings: Vec::new(),
    }
}

/// Classical (Torgerson) MDS to rank `k`.
pub fn classical_mds(d: &DissimilarityMatrix, k: usize) -> Result<EmbeddingResult> {
    let n = d.len();
    if n < 2 || k == 0 || k > n - 1 {
        return Err(Error::invalid(format!(
            "rank must satisfy 1 <= k <= n-1 (k = {k}, n = {n})"
        )));
    }
    check_symmetric(&d.values)?;
    let spectrum = gram_spectrum(&d.values);
    Ok(embed_from_spectrum(
        d.labels.clone(),
        &d.values,
        &d.values,
        spectrum,
        k,
        Method::Mds,
    ))
}
