//! L2-regularized binary logistic regression.
//!
//! Objective over rows `x_i` with targets `y_i ∈ {0, 1}`:
//!
//! ```text
//! f(w, b) = Σ_i [softplus(z_i) − y_i z_i] + (l2 / 2) ||w||²,   z_i = w·x_i + b
//! ```
//!
//! The bias is not penalized. Small problems use damped Newton steps with a
//! Cholesky solve; wide problems (many features) use L-BFGS. Both are fully
//! deterministic and stop when the gradient 2-norm drops to `tol`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Above this many features the Hessian solve is replaced by L-BFGS.
const NEWTON_MAX_FEATURES: usize = 384;
const LBFGS_MEMORY: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticConfig {
    /// Coefficient `l2` on `||w||² / 2`, added to the summed loss.
    pub l2: f64,
    pub max_iter: usize,
    /// Gradient-norm stopping threshold.
    pub tol: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            l2: 1.0,
            max_iter: 1000,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub weights: DVector<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

impl LogisticFit {
    pub fn decision(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let mut z = x * &self.weights;
        z.add_scalar_mut(self.bias);
        z
    }
}

pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct Problem<'a> {
    x: &'a DMatrix<f64>,
    y: Vec<f64>,
    l2: f64,
}

impl Problem<'_> {
    fn dim(&self) -> usize {
        self.x.ncols() + 1
    }

    fn margins(&self, theta: &DVector<f64>) -> DVector<f64> {
        let d = self.x.ncols();
        let mut z = self.x * theta.rows(0, d);
        z.add_scalar_mut(theta[d]);
        z
    }

    fn objective(&self, theta: &DVector<f64>) -> f64 {
        let d = self.x.ncols();
        let z = self.margins(theta);
        let loss: f64 = z
            .iter()
            .zip(&self.y)
            .map(|(&zi, &yi)| softplus(zi) - yi * zi)
            .sum();
        loss + 0.5 * self.l2 * theta.rows(0, d).norm_squared()
    }

    /// Gradient and the per-row probabilities it was computed from.
    fn gradient(&self, theta: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let d = self.x.ncols();
        let z = self.margins(theta);
        let p = z.map(sigmoid);
        let resid = DVector::from_iterator(p.len(), p.iter().zip(&self.y).map(|(pi, yi)| pi - yi));
        let mut g = DVector::zeros(d + 1);
        g.rows_mut(0, d).copy_from(&self.x.tr_mul(&resid));
        g.rows_mut(0, d).axpy(self.l2, &theta.rows(0, d), 1.0);
        g[d] = resid.sum();
        (g, p)
    }

    fn hessian(&self, p: &DVector<f64>) -> DMatrix<f64> {
        let n = self.x.nrows();
        let d = self.x.ncols();
        // Augmented design [X 1] scaled by sqrt(p(1-p)).
        let mut a = DMatrix::zeros(n, d + 1);
        for i in 0..n {
            let s = (p[i] * (1.0 - p[i])).sqrt();
            for j in 0..d {
                a[(i, j)] = self.x[(i, j)] * s;
            }
            a[(i, d)] = s;
        }
        let mut h = a.tr_mul(&a);
        for j in 0..d {
            h[(j, j)] += self.l2;
        }
        h
    }
}

/// Backtracking Armijo search along `dir`; returns the accepted step length.
fn line_search(
    prob: &Problem<'_>,
    theta: &DVector<f64>,
    f0: f64,
    grad: &DVector<f64>,
    dir: &DVector<f64>,
) -> Option<(f64, f64)> {
    let slope = grad.dot(dir);
    if slope >= 0.0 {
        return None;
    }
    let mut step = 1.0;
    for _ in 0..60 {
        let cand = theta + dir * step;
        let f = prob.objective(&cand);
        if f <= f0 + 1e-4 * step * slope {
            return Some((step, f));
        }
        step *= 0.5;
    }
    None
}

/// True when the predicted decrease along `dir` is lost in the rounding of `f`.
fn below_resolution(f: f64, grad: &DVector<f64>, dir: &DVector<f64>) -> bool {
    -grad.dot(dir) <= 1e-12 * (1.0 + f.abs())
}

/// Full step accepted only if it shrinks the gradient norm.
fn gradient_step(
    prob: &Problem<'_>,
    theta: &DVector<f64>,
    grad: &DVector<f64>,
    dir: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let cand = theta + dir;
    let (g, p) = prob.gradient(&cand);
    (g.norm() < grad.norm()).then_some((cand, g, p))
}

/// Fits the model; `init` optionally supplies starting `(weights, bias)`.
pub fn fit(
    x: &DMatrix<f64>,
    y: &[bool],
    config: &LogisticConfig,
    init: Option<(&[f64], f64)>,
) -> Result<LogisticFit> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "logistic targets".into(),
            expected: x.nrows(),
            found: y.len(),
        });
    }
    if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
        // nalgebra storage is column-major
        return Err(Error::NonFinite {
            context: "probe features".into(),
            row: pos % x.nrows(),
            col: pos / x.nrows(),
        });
    }
    if config.l2 <= 0.0 || !config.l2.is_finite() {
        return Err(Error::invalid("l2 coefficient must be positive and finite"));
    }
    let prob = Problem {
        x,
        y: y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        l2: config.l2,
    };
    let mut theta = DVector::zeros(prob.dim());
    if let Some((w, b)) = init {
        if w.len() != x.ncols() {
            return Err(Error::DimensionMismatch {
                context: "initial weights".into(),
                expected: x.ncols(),
                found: w.len(),
            });
        }
        theta.rows_mut(0, w.len()).copy_from_slice(w);
        theta[w.len()] = b;
    }

    let (theta, iterations, grad_norm) = if x.ncols() <= NEWTON_MAX_FEATURES {
        newton(&prob, theta, config)
    } else {
        lbfgs(&prob, theta, config)
    };
    let d = x.ncols();
    Ok(LogisticFit {
        weights: theta.rows(0, d).into_owned(),
        bias: theta[d],
        iterations,
        grad_norm,
        converged: grad_norm <= config.tol,
    })
}

fn newton(
    prob: &Problem<'_>,
    mut theta: DVector<f64>,
    config: &LogisticConfig,
) -> (DVector<f64>, usize, f64) {
    let mut f = prob.objective(&theta);
    let (mut g, mut p) = prob.gradient(&theta);
    let mut iter = 0;
    while iter < config.max_iter && g.norm() > config.tol {
        iter += 1;
        let mut h = prob.hessian(&p);
        let dir = loop {
            if let Some(chol) = h.clone().cholesky() {
                break -chol.solve(&g);
            }
            // Saturated rows can leave the bias direction without curvature.
            let bump = 1e-10 * (1.0 + h.diagonal().amax());
            for j in 0..h.nrows() {
                h[(j, j)] += bump;
            }
        };
        let dir = if g.dot(&dir) < 0.0 { dir } else { -g.clone() };
        if below_resolution(f, &g, &dir) {
            match gradient_step(prob, &theta, &g, &dir) {
                Some((cand, g_new, p_new)) => {
                    f = prob.objective(&cand);
                    theta = cand;
                    g = g_new;
                    p = p_new;
                    continue;
                }
                None => break,
            }
        }
        match line_search(prob, &theta, f, &g, &dir) {
            Some((step, f_new)) => {
                theta += dir * step;
                f = f_new;
            }
            None => break,
        }
        let (g_new, p_new) = prob.gradient(&theta);
        g = g_new;
        p = p_new;
    }
    let gn = g.norm();
    (theta, iter, gn)
}

fn lbfgs(
    prob: &Problem<'_>,
    mut theta: DVector<f64>,
    config: &LogisticConfig,
) -> (DVector<f64>, usize, f64) {
    let mut f = prob.objective(&theta);
    let (mut g, _) = prob.gradient(&theta);
    let mut s_hist: Vec<DVector<f64>> = Vec::new();
    let mut y_hist: Vec<DVector<f64>> = Vec::new();
    let mut iter = 0;
    while iter < config.max_iter && g.norm() > config.tol {
        iter += 1;
        // Two-loop recursion.
        let mut q = g.clone();
        let m = s_hist.len();
        let mut alphas = vec![0.0; m];
        for i in (0..m).rev() {
            let rho = 1.0 / y_hist[i].dot(&s_hist[i]);
            alphas[i] = rho * s_hist[i].dot(&q);
            q.axpy(-alphas[i], &y_hist[i], 1.0);
        }
        let gamma = match (s_hist.last(), y_hist.last()) {
            (Some(s), Some(y)) => s.dot(y) / y.dot(y),
            _ => 1.0 / (1.0 + g.norm()),
        };
        let mut r = q * gamma;
        for i in 0..m {
            let rho = 1.0 / y_hist[i].dot(&s_hist[i]);
            let beta = rho * y_hist[i].dot(&r);
            r.axpy(alphas[i] - beta, &s_hist[i], 1.0);
        }
        let mut dir = -r;
        if g.dot(&dir) >= 0.0 {
            dir = -g.clone();
            s_hist.clear();
            y_hist.clear();
        }
        let (s, g_new) = if below_resolution(f, &g, &dir) {
            let Some((cand, g_new, _)) = gradient_step(prob, &theta, &g, &dir) else {
                break;
            };
            f = prob.objective(&cand);
            (cand - &theta, g_new)
        } else {
            let Some((step, f_new)) = line_search(prob, &theta, f, &g, &dir) else {
                break;
            };
            f = f_new;
            let s = &dir * step;
            (s.clone(), prob.gradient(&(&theta + s)).0)
        };
        theta += &s;
        let yv = &g_new - &g;
        if s.dot(&yv) > 1e-12 * s.norm() * yv.norm() {
            if s_hist.len() == LBFGS_MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(yv);
        }
        g = g_new;
    }
    let gn = g.norm();
    (theta, iter, gn)
}

/// Objective and analytic gradient at `(weights, bias)`; exposed for gradient checks.
pub fn objective_and_gradient(
    x: &DMatrix<f64>,
    y: &[bool],
    l2: f64,
    weights: &[f64],
    bias: f64,
) -> (f64, Vec<f64>) {
    let prob = Problem {
        x,
        y: y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        l2,
    };
    let mut theta = DVector::zeros(prob.dim());
    theta.rows_mut(0, weights.len()).copy_from_slice(weights);
    theta[weights.len()] = bias;
    let f = prob.objective(&theta);
    let (g, _) = prob.gradient(&theta);
    (f, g.iter().copied().collect())
}
