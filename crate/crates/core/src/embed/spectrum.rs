//! Eigenspectrum diagnostics of the MDS Gram matrix.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mds::{check_symmetric, gram_spectrum};
use crate::dissim::DissimilarityMatrix;
use crate::error::{Error, Result};
use crate::rng::replicate_rng;

/// Relative threshold below which an eigenvalue counts as zero.
const ZERO_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumDiagnostics {
    pub participation_ratio: Option<f64>,
    pub negative_mass_fraction: Option<f64>,
    /// `r_k = λ_k / λ_{k+1}` for k = 1..n-2 on clamped eigenvalues; `None` when undefined.
    pub eigengap_ratios: Vec<Option<f64>>,
    /// One-sided permutation tail probability for each ratio.
    pub eigengap_p_hi: Vec<Option<f64>>,
    /// 1-based `k` with `p_hi < 0.05`.
    pub flagged: Vec<usize>,
    pub n_perm: usize,
}

/// `(Σλ⁺)² / Σ(λ⁺)²` over eigenvalues clamped at zero.
pub fn participation_ratio(eigenvalues: &[f64]) -> Option<f64> {
    let s: f64 = eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let s2: f64 = eigenvalues.iter().map(|v| v.max(0.0).powi(2)).sum();
    (s2 > 0.0).then(|| s * s / s2)
}

/// `Σ|λ⁻| / Σ|λ|`.
pub fn negative_mass_fraction(eigenvalues: &[f64]) -> Option<f64> {
    let total: f64 = eigenvalues.iter().map(|v| v.abs()).sum();
    let neg: f64 = eigenvalues.iter().filter(|v| **v < 0.0).map(|v| -v).sum();
    (total > 0.0).then(|| neg / total)
}

/// Consecutive ratios on the clamped spectrum. A vanishing denominator under a
/// nonzero numerator gives `+∞`; two vanishing eigenvalues give `None`.
pub fn eigengap_ratios(eigenvalues: &[f64]) -> Vec<Option<f64>> {
    let n = eigenvalues.len();
    let top = eigenvalues.iter().fold(0.0f64, |m, v| m.max(*v));
    let tol = ZERO_TOL * top;
    let clamped: Vec<f64> = eigenvalues.iter().map(|v| v.max(0.0)).collect();
    (0..n.saturating_sub(2))
        .map(|k| {
            let (num, den) = (clamped[k], clamped[k + 1]);
            if top <= 0.0 || num <= tol {
                None
            } else if den <= tol {
                Some(f64::INFINITY)
            } else {
                Some(num / den)
            }
        })
        .collect()
}

/// Permutes the upper-triangle entries and mirrors them (diagonal stays zero).
pub fn shuffle_off_diagonal(d: &DMatrix<f64>, rng: &mut impl rand::Rng) -> DMatrix<f64> {
    let n = d.nrows();
    let mut upper: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            upper.push(d[(i, j)]);
        }
    }
    upper.shuffle(rng);
    let mut out = DMatrix::zeros(n, n);
    let mut it = upper.into_iter();
    for i in 0..n {
        for j in i + 1..n {
            let v = it.next().expect("upper triangle length");
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Participation ratio, negative mass and the eigengap permutation test.
///
/// Each null replicate shuffles the off-diagonal of `d`, re-embeds it and
/// recomputes the ratios; `p_hi = (1 + #{null r_k >= observed r_k}) / (n_perm + 1)`.
pub fn spectrum_diagnostics(
    d: &DissimilarityMatrix,
    n_perm: usize,
    seed: u64,
) -> Result<SpectrumDiagnostics> {
    if n_perm == 0 {
        return Err(Error::invalid("n_perm must be at least 1"));
    }
    if d.len() < 3 {
        return Err(Error::InsufficientData(
            "spectrum diagnostics need at least 3 labels".into(),
        ));
    }
    check_symmetric(&d.values)?;
    let observed = gram_spectrum(&d.values).eigenvalues;
    let ratios = eigengap_ratios(&observed);
    let pr = participation_ratio(&observed);
    if pr.is_none() {
        return Ok(SpectrumDiagnostics {
            participation_ratio: None,
            negative_mass_fraction: None,
            eigengap_p_hi: vec![None; ratios.len()],
            eigengap_ratios: ratios,
            flagged: Vec::new(),
            n_perm,
        });
    }

    let null: Vec<Vec<Option<f64>>> = (0..n_perm)
        .into_par_iter()
        .map(|t| {
            let mut rng = replicate_rng(seed, "eigengap", t);
            let shuffled = shuffle_off_diagonal(&d.values, &mut rng);
            eigengap_ratios(&gram_spectrum(&shuffled).eigenvalues)
        })
        .collect();

    let p_hi: Vec<Option<f64>> = ratios
        .iter()
        .enumerate()
        .map(|(k, obs)| {
            obs.map(|o| {
                let hits = null
                    .iter()
                    .filter(|r| r.get(k).copied().flatten().is_some_and(|v| v >= o))
                    .count();
                (1 + hits) as f64 / (n_perm + 1) as f64
            })
        })
        .collect();
    let flagged = p_hi
        .iter()
        .enumerate()
        .filter(|(_, p)| p.is_some_and(|p| p < 0.05))
        .map(|(k, _)| k + 1)
        .collect();
    Ok(SpectrumDiagnostics {
        participation_ratio: pr,
        negative_mass_fraction: negative_mass_fraction(&observed),
        eigengap_ratios: ratios,
        eigengap_p_hi: p_hi,
        flagged,
        n_perm,
    })
}
