//! Synthetic activation bundles with known latent geometry.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::align::ReferenceCoordinates;
use crate::bundle::{ActivationBundle, ActivationRecord};
use crate::error::{Error, Result};
use crate::rng::{Rng, SeedKey};

pub const EMOTIONS: [&str; 28] = [
    "admiration", "amusement", "anger", "annoyance", "approval", "caring", "confusion",
    "curiosity", "desire", "disappointment", "disapproval", "disgust", "embarrassment",
    "excitement", "fear", "gratitude", "grief", "joy", "love", "nervousness", "optimism",
    "pride", "realization", "relief", "remorse", "sadness", "surprise", "neutral",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    GaussianClusters,
    ParabolaV,
    FlatLine,
    NoiseBulk,
    UqBoundary,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::GaussianClusters,
        Scenario::ParabolaV,
        Scenario::FlatLine,
        Scenario::NoiseBulk,
        Scenario::UqBoundary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::GaussianClusters => "gaussian_clusters",
            Scenario::ParabolaV => "parabola_v",
            Scenario::FlatLine => "flat_line",
            Scenario::NoiseBulk => "noise_bulk",
            Scenario::UqBoundary => "uq_boundary",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown scenario `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub scenario: Scenario,
    pub n_labels: usize,
    pub n_per_label: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub noise_scale: f64,
    /// Scale of the label-mean configuration at the last layer.
    pub separation: f64,
    /// Misclassified records per unordered label pair, split between both directions.
    pub n_wrong_per_pair: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Defaults sized for desk-scale runs of each scenario.
    pub fn preset(scenario: Scenario) -> Self {
        let base = SyntheticSpec {
            scenario,
            n_labels: 8,
            n_per_label: 200,
            hidden_dim: 16,
            n_layers: 4,
            noise_scale: 1.0,
            separation: 3.0,
            n_wrong_per_pair: 0,
            seed: 0,
        };
        match scenario {
            Scenario::GaussianClusters => SyntheticSpec { separation: 5.0, ..base },
            Scenario::NoiseBulk => base,
            Scenario::ParabolaV => SyntheticSpec {
                n_labels: 25,
                n_per_label: 500,
                hidden_dim: 8,
                n_layers: 2,
                separation: 2.0,
                ..base
            },
            Scenario::FlatLine => SyntheticSpec { n_labels: 10, n_layers: 2, ..base },
            Scenario::UqBoundary => SyntheticSpec {
                n_labels: 4,
                n_per_label: 1000,
                separation: 4.0,
                n_wrong_per_pair: 300,
                ..base
            },
        }
    }

    /// Small end-to-end fixture: clustered labels with misclassified records
    /// for every pair.
    pub fn smoke() -> Self {
        SyntheticSpec {
            scenario: Scenario::GaussianClusters,
            n_labels: 6,
            n_per_label: 150,
            hidden_dim: 8,
            n_layers: 4,
            noise_scale: 1.0,
            separation: 3.0,
            n_wrong_per_pair: 60,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_labels < 2 {
            problems.push("n_labels must be at least 2".to_string());
        }
        if self.n_per_label == 0 {
            problems.push("n_per_label must be positive".to_string());
        }
        if self.hidden_dim < 2 {
            problems.push("hidden_dim must be at least 2".to_string());
        }
        if self.n_layers == 0 {
            problems.push("n_layers must be positive".to_string());
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            problems.push("noise_scale must be finite and nonnegative".to_string());
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            problems.push("separation must be finite and nonnegative".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(problems.join("; ")))
        }
    }

    fn rng(&self, stage: &str) -> Rng {
        SeedKey::new(self.seed).str("synth").str(self.scenario.name()).str(stage).rng()
    }
}

pub fn label_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| EMOTIONS.get(i).map_or_else(|| format!("label_{i}"), |s| s.to_string()))
        .collect()
}

fn arc_length(x: f64) -> f64 {
    // ∫ sqrt(1 + 4t²) dt from 0 to x
    0.5 * x * (1.0 + 4.0 * x * x).sqrt() + 0.25 * (2.0 * x).asinh()
}

/// `n` points on `y = x²`, `x ∈ [-2, 2]`, spaced at equal arc length.
pub fn parabola_points(n: usize) -> Vec<(f64, f64)> {
    let (lo, hi) = (arc_length(-2.0), arc_length(2.0));
    (0..n)
        .map(|i| {
            let target = lo + (hi - lo) * i as f64 / (n - 1).max(1) as f64;
            let (mut a, mut b) = (-2.0f64, 2.0f64);
            for _ in 0..100 {
                let m = 0.5 * (a + b);
                if arc_length(m) < target {
                    a = m;
                } else {
                    b = m;
                }
            }
            let x = 0.5 * (a + b);
            (x, x * x)
        })
        .collect()
}

fn gaussian_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Label means at the last layer (`n_labels x hidden_dim`).
pub fn label_means(spec: &SyntheticSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let (n, h, s) = (spec.n_labels, spec.hidden_dim, spec.separation);
    let mut rng = spec.rng("means");
    Ok(match spec.scenario {
        Scenario::UqBoundary if n <= h => {
            // equidistant means: every pair separated by `s`
            DMatrix::from_fn(n, h, |i, j| if i == j { s / std::f64::consts::SQRT_2 } else { 0.0 })
        }
        Scenario::GaussianClusters | Scenario::UqBoundary => {
            let m = h.min(n);
            let g: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut rng, m)).collect();
            DMatrix::from_fn(n, h, |i, j| if j < m { s * g[i][j] / std::f64::consts::SQRT_2 } else { 0.0 })
        }
        Scenario::ParabolaV => {
            // centered so the vertex sits below the origin
            let pts = parabola_points(n);
            let my = pts.iter().map(|p| p.1).sum::<f64>() / n as f64;
            DMatrix::from_fn(n, h, |i, j| match j {
                0 => s * pts[i].0 / 2.0,
                1 => s * (pts[i].1 - my) / 2.0,
                _ => 0.0,
            })
        }
        Scenario::FlatLine => {
            let mut u = gaussian_vec(&mut rng, h);
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            u.iter_mut().for_each(|v| *v /= norm);
            let mid = (n - 1) as f64 / 2.0;
            DMatrix::from_fn(n, h, |i, j| s * (i as f64 - mid) * u[j])
        }
        Scenario::NoiseBulk => DMatrix::zeros(n, h),
    })
}

/// Layer `l` carries the means scaled by `(l + 1) / n_layers`.
fn layer_scale(spec: &SyntheticSpec, layer: usize) -> f64 {
    (layer + 1) as f64 / spec.n_layers as f64
}

/// Two-dimensional ground truth usable as (valence, arousal) reference.
pub fn reference_coordinates(spec: &SyntheticSpec) -> Result<ReferenceCoordinates> {
    let means = label_means(spec)?;
    let coords = means.columns(0, 2).into_owned();
    ReferenceCoordinates::new(label_names(spec.n_labels), coords)
}

pub fn reference_csv(reference: &ReferenceCoordinates) -> String {
    let mut out = String::from("label,valence,arousal\n");
    for (i, l) in reference.labels.iter().enumerate() {
        out.push_str(&format!("{l},{},{}\n", reference.coords[(i, 0)], reference.coords[(i, 1)]));
    }
    out
}

enum Center {
    Label(usize),
    /// Between the true and output labels.
    Between { truth: usize, output: usize },
}

/// Position along `truth → output` for a misclassified record: drifts from
/// 0.4 (nearer the true label) at the first layer to 0.6 at the last.
fn drift(layer: usize, n_layers: usize) -> f64 {
    if n_layers == 1 {
        0.5
    } else {
        0.4 + 0.2 * layer as f64 / (n_layers - 1) as f64
    }
}

/// Generates the bundle of `spec`. Correct records are listed label by label,
/// then misclassified records pair by pair (alternating direction).
pub fn generate(spec: &SyntheticSpec) -> Result<ActivationBundle> {
    let means = label_means(spec)?;
    let labels = label_names(spec.n_labels);
    let (h, n_layers) = (spec.hidden_dim, spec.n_layers);
    let mut records = Vec::new();
    let mut centers = Vec::new();
    for (li, label) in labels.iter().enumerate() {
        for _ in 0..spec.n_per_label {
            records.push(ActivationRecord::correct(format!("r{:06}", records.len()), label.clone()));
            centers.push(Center::Label(li));
        }
    }
    for i in 0..spec.n_labels {
        for j in i + 1..spec.n_labels {
            for w in 0..spec.n_wrong_per_pair {
                let (truth, output) = if w % 2 == 0 { (i, j) } else { (j, i) };
                records.push(ActivationRecord::misclassified(
                    format!("r{:06}", records.len()),
                    labels[truth].clone(),
                    labels[output].clone(),
                ));
                centers.push(Center::Between { truth, output });
            }
        }
    }

    let mut rng = spec.rng("records");
    let mut layer_matrices = Vec::with_capacity(n_layers);
    for layer in 0..n_layers {
        let scale = layer_scale(spec, layer);
        let t = drift(layer, n_layers);
        let mut m = Vec::with_capacity(records.len() * h);
        for center in &centers {
            for c in 0..h {
                let mu = match *center {
                    Center::Label(l) => means[(l, c)],
                    Center::Between { truth, output } => {
                        means[(truth, c)] + t * (means[(output, c)] - means[(truth, c)])
                    }
                };
                let z: f64 = rng.sample(StandardNormal);
                m.push((scale * mu + spec.noise_scale * z) as f32);
            }
        }
        layer_matrices.push(m);
    }
    ActivationBundle::new(format!("synthetic/{}", spec.scenario), h, records, layer_matrices)
}

/// Dissimilarities with two blocks: `within` inside each half, `across` between.
pub fn two_cluster_matrix(n: usize, within: f64, across: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else if (i < n / 2) == (j < n / 2) {
            within
        } else {
            across
        }
    })
}

/// Symmetric matrix with i.i.d. uniform(0, 1) off-diagonal entries.
pub fn noise_matrix(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = SeedKey::new(seed).str("noise-matrix").rng();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = rng.random();
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}
