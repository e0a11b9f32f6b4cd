//! Scaled orthogonal Procrustes alignment against reference valence/arousal
//! coordinates, with label-permutation significance.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::replicate_rng;

/// Per-label (valence, arousal) coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceCoordinates {
    pub labels: Vec<String>,
    /// n x 2, columns valence and arousal.
    pub coords: DMatrix<f64>,
}

impl ReferenceCoordinates {
    pub fn new(labels: Vec<String>, coords: DMatrix<f64>) -> Result<Self> {
        if coords.nrows() != labels.len() || coords.ncols() != 2 {
            return Err(Error::DimensionMismatch {
                context: "reference coordinates".into(),
                expected: labels.len(),
                found: coords.nrows(),
            });
        }
        let mut seen = HashMap::new();
        for (i, l) in labels.iter().enumerate() {
            if seen.insert(l.as_str(), i).is_some() {
                return Err(Error::DuplicateLabel(l.clone()));
            }
        }
        for ((r, c), v) in coords.iter().enumerate().map(|(k, v)| ((k % labels.len(), k / labels.len()), v)) {
            if !v.is_finite() {
                return Err(Error::NonFinite { context: "reference coordinates".into(), row: r, col: c });
            }
        }
        Ok(ReferenceCoordinates { labels, coords })
    }
}

/// Parses CSV text with `label`, `valence` and `arousal` columns (any order,
/// case-insensitive header; other columns are ignored).
pub fn parse_reference(text: &str) -> Result<ReferenceCoordinates> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::invalid(format!("reference csv lacks a `{name}` column")))
    };
    let (cl, cv, ca) = (col("label")?, col("valence")?, col("arousal")?);
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |c: usize| {
            rec.get(c)
                .ok_or_else(|| Error::invalid(format!("reference line {line}: missing field")))
        };
        let label = field(cl)?.to_string();
        if label.is_empty() {
            return Err(Error::invalid(format!("reference line {line}: empty label")));
        }
        let num = |c: usize, what: &str| -> Result<f64> {
            let raw = field(c)?;
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::invalid(format!("reference line {line}: bad {what} `{raw}`")))
        };
        let (v, a) = (num(cv, "valence")?, num(ca, "arousal")?);
        labels.push(label);
        values.push((v, a));
    }
    let coords = DMatrix::from_fn(values.len(), 2, |i, c| if c == 0 { values[i].0 } else { values[i].1 });
    ReferenceCoordinates::new(labels, coords)
}

pub fn load_reference(path: &Path) -> Result<ReferenceCoordinates> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_reference(&text)
}

/// Row-aligned `(X, Y, labels)` over labels present in both sets, in
/// embedding order. Only the first two embedding columns are used.
pub fn intersect_labels(
    labels: &[String],
    coords: &DMatrix<f64>,
    reference: &ReferenceCoordinates,
) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<String>)> {
    if coords.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "embedding rows".into(),
            expected: labels.len(),
            found: coords.nrows(),
        });
    }
    if coords.ncols() < 2 {
        return Err(Error::invalid("alignment needs an embedding of rank at least 2"));
    }
    let index: HashMap<&str, usize> =
        reference.labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let pairs: Vec<(usize, usize)> = labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| index.get(l.as_str()).map(|&j| (i, j)))
        .collect();
    if pairs.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "{} common label(s) between embedding and reference; at least 3 required",
            pairs.len()
        )));
    }
    let x = DMatrix::from_fn(pairs.len(), 2, |r, c| coords[(pairs[r].0, c)]);
    let y = DMatrix::from_fn(pairs.len(), 2, |r, c| reference.coords[(pairs[r].1, c)]);
    let common = pairs.iter().map(|&(i, _)| labels[i].clone()).collect();
    Ok((x, y, common))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcrustesResult {
    /// Row-major 2 x 2.
    pub rotation: [[f64; 2]; 2],
    pub scale: f64,
    pub r_squared: f64,
    pub p_value: Option<f64>,
    pub r_val: f64,
    pub r_aro: f64,
    pub p_val_axis: Option<f64>,
    pub p_aro_axis: Option<f64>,
    pub n_common_labels: usize,
    pub n_perm: usize,
}

impl ProcrustesResult {
    pub fn rotation_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(2, 2, |i, j| self.rotation[i][j])
    }
}

fn center(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows() as f64;
    let mut c = m.clone();
    for j in 0..m.ncols() {
        let mean = m.column(j).sum() / n;
        c.column_mut(j).add_scalar_mut(-mean);
    }
    c
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        0.0
    } else {
        (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
    }
}

struct Fit {
    rotation: DMatrix<f64>,
    scale: f64,
    r_squared: f64,
    r_val: f64,
    r_aro: f64,
}

/// `xc` must already be centered with nonzero norm.
fn fit_centered(xc: &DMatrix<f64>, xc_norm2: f64, y: &DMatrix<f64>) -> Result<Fit> {
    let yc = center(y);
    let yc_norm2 = yc.norm_squared();
    if yc_norm2 <= 0.0 {
        return Err(Error::Degenerate("reference coordinates have zero spread".into()));
    }
    let svd = (xc.transpose() * &yc).svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let rotation = u * vt;
    let scale = svd.singular_values.sum() / xc_norm2;
    let aligned = xc * &rotation * scale;
    let r_squared = 1.0 - (&aligned - &yc).norm_squared() / yc_norm2;
    let col = |m: &DMatrix<f64>, j: usize| m.column(j).iter().copied().collect::<Vec<f64>>();
    Ok(Fit {
        r_val: pearson(&col(&aligned, 0), &col(&yc, 0)),
        r_aro: pearson(&col(&aligned, 1), &col(&yc, 1)),
        rotation,
        scale,
        r_squared,
    })
}

fn prepare(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    if x.nrows() != y.nrows() || x.ncols() != 2 || y.ncols() != 2 {
        return Err(Error::DimensionMismatch {
            context: "procrustes inputs (n x 2)".into(),
            expected: x.nrows(),
            found: y.nrows(),
        });
    }
    if x.nrows() < 3 {
        return Err(Error::InsufficientData("procrustes needs at least 3 rows".into()));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("procrustes inputs contain non-finite values"));
    }
    let xc = center(x);
    let norm2 = xc.norm_squared();
    if norm2 <= 0.0 {
        return Err(Error::Degenerate("embedding rows are all equal".into()));
    }
    Ok((xc, norm2))
}

/// Rotation (reflections allowed), isotropic scale and R² of `Y_c ≈ a X_c R`.
pub fn procrustes_fit(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<ProcrustesResult> {
    let (xc, norm2) = prepare(x, y)?;
    let f = fit_centered(&xc, norm2, y)?;
    Ok(ProcrustesResult {
        rotation: [[f.rotation[(0, 0)], f.rotation[(0, 1)]], [f.rotation[(1, 0)], f.rotation[(1, 1)]]],
        scale: f.scale,
        r_squared: f.r_squared,
        p_value: None,
        r_val: f.r_val,
        r_aro: f.r_aro,
        p_val_axis: None,
        p_aro_axis: None,
        n_common_labels: x.nrows(),
        n_perm: 0,
    })
}

/// R² of a fixed `(R, a)` on centered data.
pub fn r_squared_at(x: &DMatrix<f64>, y: &DMatrix<f64>, rotation: &DMatrix<f64>, scale: f64) -> f64 {
    let (xc, yc) = (center(x), center(y));
    1.0 - (&xc * rotation * scale - &yc).norm_squared() / yc.norm_squared()
}

/// [`procrustes_fit`] plus permutation p-values: rows of `Y` are shuffled and
/// the alignment refit per replicate, for R² and both axis correlations.
pub fn procrustes_permutation_test(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    n_perm: usize,
    seed: u64,
) -> Result<ProcrustesResult> {
    if n_perm == 0 {
        return Err(Error::invalid("n_perm must be at least 1"));
    }
    let mut result = procrustes_fit(x, y)?;
    let (xc, norm2) = prepare(x, y)?;
    let n = x.nrows();
    let null: Vec<(f64, f64, f64)> = (0..n_perm)
        .into_par_iter()
        .map(|t| {
            let mut rng = replicate_rng(seed, "procrustes", t);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let yp = DMatrix::from_fn(n, 2, |i, c| y[(order[i], c)]);
            let f = fit_centered(&xc, norm2, &yp).expect("permutation keeps the spread of Y");
            (f.r_squared, f.r_val.abs(), f.r_aro.abs())
        })
        .collect();
    let p = |hits: usize| (1 + hits) as f64 / (n_perm + 1) as f64;
    result.p_value = Some(p(null.iter().filter(|v| v.0 >= result.r_squared).count()));
    result.p_val_axis = Some(p(null.iter().filter(|v| v.1 >= result.r_val.abs()).count()));
    result.p_aro_axis = Some(p(null.iter().filter(|v| v.2 >= result.r_aro.abs()).count()));
    result.n_perm = n_perm;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_x() -> DMatrix<f64> {
        DMatrix::from_row_slice(5, 2, &[0.0, 0.0, 1.0, 0.2, 0.3, 1.5, -1.0, 0.7, 0.4, -0.9])
    }

    #[test]
    fn identity_alignment() {
        let x = sample_x();
        let r = procrustes_fit(&x, &x).unwrap();
        assert!((r.r_squared - 1.0).abs() < 1e-12);
        assert!((r.scale - 1.0).abs() < 1e-12);
        let rot = r.rotation_matrix();
        assert!((rot.transpose() * &rot - DMatrix::identity(2, 2)).amax() < 1e-10);
        assert!((center(&x) * rot - center(&x)).amax() < 1e-12);
    }

    #[test]
    fn scaled_rotation() {
        let x = sample_x();
        let rot90 = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let y = &x * rot90 * 2.0;
        let r = procrustes_fit(&x, &y).unwrap();
        assert!((r.r_squared - 1.0).abs() < 1e-12);
        assert!((r.scale - 2.0).abs() < 1e-12);
    }

    #[test]
    fn reflection_allowed() {
        let x = sample_x();
        let flip = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let r = procrustes_fit(&x, &(&x * flip)).unwrap();
        assert!((r.r_squared - 1.0).abs() < 1e-12);
        assert!((r.rotation_matrix().determinant() + 1.0).abs() < 1e-10);
    }

    #[test]
    fn degenerate_inputs() {
        let x = DMatrix::from_element(4, 2, 1.0);
        assert!(matches!(procrustes_fit(&x, &sample_x().rows(0, 4).into_owned()), Err(Error::Degenerate(_))));
        let two = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0]);
        assert!(procrustes_fit(&two, &two).is_err());
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 1 {
            return vec![vec![0]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..n {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn only_identity_ties_a_perfect_fit() {
        let x = sample_x();
        let rot = DMatrix::from_row_slice(2, 2, &[0.6, 0.8, -0.8, 0.6]);
        let y = &x * rot * 3.0;
        for perm in permutations(5) {
            let yp = DMatrix::from_fn(5, 2, |i, c| y[(perm[i], c)]);
            let r2 = procrustes_fit(&x, &yp).unwrap().r_squared;
            let identity = perm.iter().enumerate().all(|(i, &p)| i == p);
            assert_eq!(identity, r2 > 1.0 - 1e-9, "{perm:?}");
        }
    }

    #[test]
    fn perfect_fit_p_value() {
        let x = DMatrix::from_fn(12, 2, |i, c| ((i * 7 + c * 3) % 11) as f64 + 0.1 * (i * i) as f64);
        let rot = DMatrix::from_row_slice(2, 2, &[0.6, 0.8, -0.8, 0.6]);
        let y = &x * rot * 3.0;
        let r = procrustes_permutation_test(&x, &y, 2000, 7).unwrap();
        assert_eq!(r.p_value, Some(1.0 / 2001.0));
        let again = procrustes_permutation_test(&x, &y, 2000, 7).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn reference_parsing() {
        let csv = "Label,Valence,Arousal,Dominance\njoy,8.2,6.5,7\nfear, 2.1 ,7.0,3\ncalm,6.9,2.0,6\n";
        let r = parse_reference(csv).unwrap();
        assert_eq!(r.labels, vec!["joy", "fear", "calm"]);
        assert_eq!(r.coords[(1, 0)], 2.1);
        let dup = "label,valence,arousal\njoy,1,2\njoy,3,4\n";
        let err = parse_reference(dup).unwrap_err().to_string();
        assert!(err.contains("joy"));
        let bad = "label,valence,arousal\njoy,1,2\nfear,x,4\n";
        let err = parse_reference(bad).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn intersection() {
        let reference = parse_reference("label,valence,arousal\na,1,2\nc,3,1\nd,0,0\nb,2,2\n").unwrap();
        let labels: Vec<String> = ["a", "b", "c", "z"].iter().map(|s| s.to_string()).collect();
        let coords = DMatrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64);
        let (x, y, common) = intersect_labels(&labels, &coords, &reference).unwrap();
        assert_eq!(common, vec!["a", "b", "c"]);
        assert_eq!(x[(1, 1)], 4.0);
        assert_eq!(y[(1, 0)], 2.0);
        let none: Vec<String> = ["q", "r", "s"].iter().map(|s| s.to_string()).collect();
        assert!(intersect_labels(&none, &DMatrix::zeros(3, 2), &reference).is_err());
    }
}
