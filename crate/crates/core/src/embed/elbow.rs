//! Residual-variance curves and the elbow rule for choosing an embedding rank.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{gram_spectrum, knn_geodesics, pairwise_distances};
use super::mds::check_symmetric;
use crate::dissim::DissimilarityMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum ElbowMethod {
    Mds,
    Isomap { k_neighbors: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Elbow {
    pub rank: usize,
    /// Residual variance at ranks 1..n-1 (index 0 = rank 1).
    pub curve: Vec<f64>,
    pub warnings: Vec<String>,
}

fn upper(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut v = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            v.push(m[(i, j)]);
        }
    }
    v
}

/// `1 - corr²` between embedded and target pairwise distances.
///
/// Fails when either distance vector is constant.
pub fn residual_variance(target: &DMatrix<f64>, coords: &DMatrix<f64>) -> Result<f64> {
    let a = upper(target);
    let b = upper(&pairwise_distances(coords));
    if a.len() < 2 {
        return Err(Error::Degenerate("fewer than two distances".into()));
    }
    let m = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / m, b.iter().sum::<f64>() / m);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(&b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let scale_a = a.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(f64::MIN_POSITIVE);
    let scale_b = b.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(f64::MIN_POSITIVE);
    if saa <= 1e-24 * scale_a * scale_a * m || sbb <= 1e-24 * scale_b * scale_b * m {
        return Err(Error::Degenerate("constant distance vector".into()));
    }
    let r = sab / (saa.sqrt() * sbb.sqrt());
    Ok((1.0 - r * r).clamp(0.0, 1.0))
}

/// Smallest rank `d` whose residual-variance drop from `d-1` is below
/// `threshold`, with `RV(0) = 1`.
pub fn residual_variance_elbow(
    d: &DissimilarityMatrix,
    method: ElbowMethod,
    threshold: f64,
) -> Result<Elbow> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::invalid("elbow threshold must be positive"));
    }
    let n = d.len();
    if n < 3 {
        return Err(Error::InsufficientData("elbow needs at least 3 labels".into()));
    }
    check_symmetric(&d.values)?;
    let mut warnings = Vec::new();
    let target = match method {
        ElbowMethod::Mds => d.values.clone(),
        ElbowMethod::Isomap { k_neighbors } => {
            let (g, diag) = knn_geodesics(d, k_neighbors)?;
            warnings.extend(diag.warnings);
            g
        }
    };
    let flat = upper(&target);
    if flat.iter().all(|v| *v == flat[0]) {
        warnings.push("target distances are constant; rank 1 returned".into());
        return Ok(Elbow { rank: 1, curve: Vec::new(), warnings });
    }
    let spectrum = gram_spectrum(&target);
    let curve: Vec<f64> = (1..n)
        .map(|r| residual_variance(&target, &spectrum.coords(r)).unwrap_or(1.0))
        .collect();
    let mut prev = 1.0;
    for (i, &rv) in curve.iter().enumerate() {
        if prev - rv < threshold {
            return Ok(Elbow { rank: i + 1, curve, warnings });
        }
        prev = rv;
    }
    warnings.push(format!("no residual-variance drop below {threshold}; rank {} returned", n - 1));
    Ok(Elbow { rank: n - 1, curve, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dissim::Metric;

    fn from_points(p: DMatrix<f64>) -> DissimilarityMatrix {
        let labels = (0..p.nrows()).map(|i| format!("p{i}")).collect();
        DissimilarityMatrix::from_points(labels, &p).unwrap()
    }

    #[test]
    fn planar_configuration() {
        let p = DMatrix::from_row_slice(
            7,
            2,
            &[0.0, 0.0, 3.0, 0.5, 1.0, 2.0, -1.5, 1.0, 2.0, -2.0, -0.5, -1.5, 4.0, 3.0],
        );
        let e = residual_variance_elbow(&from_points(p), ElbowMethod::Mds, 0.02).unwrap();
        assert!(e.curve[1] < 1e-12);
        assert_eq!(e.rank, 3);
    }

    #[test]
    fn collinear_configuration() {
        let p = DMatrix::from_column_slice(6, 1, &[0.0, 1.0, 1.5, 4.0, 6.0, 9.0]);
        let e = residual_variance_elbow(&from_points(p), ElbowMethod::Mds, 0.02).unwrap();
        assert_eq!(e.rank, 2);
    }

    #[test]
    fn infinite_threshold() {
        let p = DMatrix::from_column_slice(5, 1, &[0.0, 1.0, 2.0, 4.0, 8.0]);
        let e = residual_variance_elbow(&from_points(p), ElbowMethod::Mds, f64::INFINITY).unwrap();
        assert_eq!(e.rank, 1);
    }

    #[test]
    fn constant_target() {
        let n = 5;
        let v = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 });
        let d = DissimilarityMatrix::from_matrix((0..n).map(|i| i.to_string()).collect(), v, Metric::External)
            .unwrap();
        let e = residual_variance_elbow(&d, ElbowMethod::Mds, 0.02).unwrap();
        assert_eq!(e.rank, 1);
        assert!(!e.warnings.is_empty());
    }

    #[test]
    fn bad_threshold() {
        let p = DMatrix::from_column_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        assert!(residual_variance_elbow(&from_points(p.clone()), ElbowMethod::Mds, 0.0).is_err());
    }
}
