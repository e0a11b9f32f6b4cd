//! Trustworthiness of an embedding:
//!
//! ```text
//! T(k) = 1 - 2 / (n k (2n - 3k - 1)) * Σ_i Σ_{j ∈ U_i} (r_i(j) - k)
//! ```
//!
//! `U_i` holds the embedding-space k-neighbors of `i` that are not among its
//! original-space k-neighbors, and `r_i(j)` is the 1-based rank of `j` by
//! original dissimilarity from `i`. Rank ties are broken by index.

use nalgebra::DMatrix;

use super::pairwise_distances;
use crate::error::{Error, Result};

/// Neighbor counts `k` with `1 <= k < n/2`.
pub fn valid_trust_ks(n: usize) -> impl Iterator<Item = usize> {
    (1..n).take_while(move |k| 2 * k < n)
}

/// Neighbor count used when a single trustworthiness score is needed:
/// `min(5, largest valid k)`.
pub fn default_trust_k(n: usize) -> Option<usize> {
    valid_trust_ks(n).last().map(|k| k.min(5))
}

/// Other indices ordered by (distance, index).
fn neighbor_order(dist: &DMatrix<f64>, i: usize) -> Vec<usize> {
    let mut others: Vec<usize> = (0..dist.nrows()).filter(|&j| j != i).collect();
    others.sort_by(|&a, &b| {
        dist[(i, a)]
            .partial_cmp(&dist[(i, b)])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    others
}

pub fn trustworthiness(original: &DMatrix<f64>, coords: &DMatrix<f64>, k: usize) -> Result<f64> {
    let n = original.nrows();
    if original.ncols() != n || coords.nrows() != n {
        return Err(Error::DimensionMismatch {
            context: "trustworthiness inputs".into(),
            expected: n,
            found: coords.nrows(),
        });
    }
    if k == 0 || 2 * k >= n {
        return Err(Error::invalid(format!(
            "trustworthiness needs 1 <= k < n/2 (k = {k}, n = {n})"
        )));
    }
    let embedded = pairwise_distances(coords);
    let mut penalty: u64 = 0;
    for i in 0..n {
        let orig = neighbor_order(original, i);
        let mut rank = vec![0usize; n];
        for (r, &j) in orig.iter().enumerate() {
            rank[j] = r + 1;
        }
        let low = neighbor_order(&embedded, i);
        for &j in &low[..k] {
            if rank[j] > k {
                penalty += (rank[j] - k) as u64;
            }
        }
    }
    let (nf, kf) = (n as f64, k as f64);
    Ok(1.0 - 2.0 / (nf * kf * (2.0 * nf - 3.0 * kf - 1.0)) * penalty as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range() {
        assert_eq!(valid_trust_ks(10).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert_eq!(valid_trust_ks(9).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert_eq!(valid_trust_ks(3).collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn perfect_embedding() {
        let pts = DMatrix::from_column_slice(8, 1, &[0.0, 1.0, 3.0, 4.5, 7.0, 8.0, 11.0, 15.0]);
        let d = pairwise_distances(&pts);
        for k in valid_trust_ks(8) {
            assert_eq!(trustworthiness(&d, &(pts.clone() * 2.0), k).unwrap(), 1.0);
        }
    }

    #[test]
    fn out_of_range() {
        let d = DMatrix::zeros(4, 4);
        let c = DMatrix::zeros(4, 1);
        assert!(trustworthiness(&d, &c, 0).is_err());
        assert!(trustworthiness(&d, &c, 2).is_err());
    }
}
