//! Brute-force reference implementations shared by integration tests.
#![allow(dead_code)]

use nalgebra::DMatrix;

pub fn euclidean(points: &DMatrix<f64>) -> DMatrix<f64> {
    let n = points.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        (0..points.ncols())
            .map(|c| (points[(i, c)] - points[(j, c)]).powi(2))
            .sum::<f64>()
            .sqrt()
    })
}

/// 1-based rank of `j` among the others by distance from `i`, ties by index.
fn rank(d: &DMatrix<f64>, i: usize, j: usize) -> usize {
    let n = d.nrows();
    1 + (0..n)
        .filter(|&m| m != i && m != j)
        .filter(|&m| d[(i, m)] < d[(i, j)] || (d[(i, m)] == d[(i, j)] && m < j))
        .count()
}

/// Trustworthiness straight from its definition, O(n³).
pub fn trustworthiness(original: &DMatrix<f64>, coords: &DMatrix<f64>, k: usize) -> f64 {
    let n = original.nrows();
    let emb = euclidean(coords);
    let mut sum = 0i64;
    for i in 0..n {
        for j in 0..n {
            if j == i {
                continue;
            }
            let in_embedded = rank(&emb, i, j) <= k;
            let r = rank(original, i, j);
            if in_embedded && r > k {
                sum += (r - k) as i64;
            }
        }
    }
    let (nf, kf) = (n as f64, k as f64);
    1.0 - 2.0 / (nf * kf * (2.0 * nf - 3.0 * kf - 1.0)) * sum as f64
}

/// Fraction of (positive, negative) pairs ordered correctly, ties half.
pub fn auc(scores: &[f64], outcomes: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &oi) in outcomes.iter().enumerate() {
        for (j, &oj) in outcomes.iter().enumerate() {
            if oi && !oj {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

fn center(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = m.clone();
    for j in 0..m.ncols() {
        let mean = m.column(j).mean();
        for i in 0..m.nrows() {
            c[(i, j)] -= mean;
        }
    }
    c
}

/// Best R² over rotations and reflections in the plane with the optimal
/// scale for each, via an angle grid refined by golden-section search.
pub fn procrustes_r2(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let (xc, yc) = (center(x), center(y));
    let xx = xc.norm_squared();
    let yy = yc.norm_squared();
    let eval = |theta: f64, reflect: bool| -> f64 {
        let (c, s) = (theta.cos(), theta.sin());
        let r = if reflect {
            DMatrix::from_row_slice(2, 2, &[c, s, s, -c])
        } else {
            DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
        };
        let xr = &xc * r;
        let a = (xr.component_mul(&yc).sum() / xx).max(0.0);
        1.0 - (xr * a - &yc).norm_squared() / yy
    };
    let mut best = f64::NEG_INFINITY;
    let steps = 3600;
    for reflect in [false, true] {
        for s in 0..steps {
            let t0 = 2.0 * std::f64::consts::PI * s as f64 / steps as f64;
            let (mut lo, mut hi) = (t0 - 0.002, t0 + 0.002);
            if eval(t0, reflect) + 1e-3 < best {
                continue;
            }
            let g = 0.5 * (5f64.sqrt() - 1.0);
            for _ in 0..80 {
                let a = hi - g * (hi - lo);
                let b = lo + g * (hi - lo);
                if eval(a, reflect) > eval(b, reflect) {
                    hi = b;
                } else {
                    lo = a;
                }
            }
            best = best.max(eval(0.5 * (lo + hi), reflect)).max(eval(t0, reflect));
        }
    }
    best
}
