//! Pipeline configuration: one JSON file plus command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use repgeo::uq::UqConfig;
use repgeo::ProbeConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DissimMetric {
    Accuracy,
    AffineAccuracy,
    Cosine,
    SignificanceGated,
}

impl FromStr for DissimMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown metric `{s}` (accuracy, affine_accuracy, cosine, significance_gated)"))
    }
}

/// `"all"`, `"peak"` or an explicit list of layer indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LayerSpec", into = "LayerSpec")]
pub enum LayerSelection {
    All,
    Peak,
    List(Vec<usize>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LayerSpec {
    Named(String),
    List(Vec<usize>),
}

impl TryFrom<LayerSpec> for LayerSelection {
    type Error = String;

    fn try_from(v: LayerSpec) -> Result<Self, String> {
        match v {
            LayerSpec::Named(s) => s.parse(),
            LayerSpec::List(l) => Ok(LayerSelection::List(l)),
        }
    }
}

impl From<LayerSelection> for LayerSpec {
    fn from(v: LayerSelection) -> Self {
        match v {
            LayerSelection::All => LayerSpec::Named("all".into()),
            LayerSelection::Peak => LayerSpec::Named("peak".into()),
            LayerSelection::List(l) => LayerSpec::List(l),
        }
    }
}

impl FromStr for LayerSelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "all" => Ok(LayerSelection::All),
            "peak" => Ok(LayerSelection::Peak),
            list => list
                .split(',')
                .map(|t| t.trim().parse::<usize>().map_err(|_| format!("invalid layer `{t}`")))
                .collect::<Result<Vec<_>, _>>()
                .map(LayerSelection::List),
        }
    }
}

impl fmt::Display for LayerSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSelection::All => f.write_str("all"),
            LayerSelection::Peak => f.write_str("peak"),
            LayerSelection::List(l) => {
                let parts: Vec<String> = l.iter().map(|v| v.to_string()).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

/// `"auto"` or a fixed neighbor count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "KSpec", into = "KSpec")]
pub enum KNeighbors {
    Auto,
    Fixed(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum KSpec {
    Named(String),
    Fixed(usize),
}

impl TryFrom<KSpec> for KNeighbors {
    type Error = String;

    fn try_from(v: KSpec) -> Result<Self, String> {
        match v {
            KSpec::Named(s) => s.parse(),
            KSpec::Fixed(k) => Ok(KNeighbors::Fixed(k)),
        }
    }
}

impl From<KNeighbors> for KSpec {
    fn from(v: KNeighbors) -> Self {
        match v {
            KNeighbors::Auto => KSpec::Named("auto".into()),
            KNeighbors::Fixed(k) => KSpec::Fixed(k),
        }
    }
}

impl FromStr for KNeighbors {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "auto" => Ok(KNeighbors::Auto),
            k => k
                .parse()
                .map(KNeighbors::Fixed)
                .map_err(|_| format!("k-neighbors must be `auto` or an integer, got `{k}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteerSettings {
    /// Defaults to the first retained label.
    pub source: Option<String>,
    /// Defaults to the second retained label.
    pub target: Option<String>,
    pub neutral: Option<String>,
    #[serde(rename = "K")]
    pub k: usize,
    pub alpha: f64,
}

impl Default for SteerSettings {
    fn default() -> Self {
        SteerSettings { source: None, target: None, neutral: None, k: 3, alpha: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub bundle_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub min_correct: usize,
    pub metric: DissimMetric,
    /// p-value cutoff of the significance-gated metric.
    pub significance_alpha: f64,
    pub layers: LayerSelection,
    pub mds_rank: usize,
    pub isomap_rank: usize,
    pub k_neighbors: KNeighbors,
    /// Replicates of every permutation test (significance, eigengap, Procrustes).
    pub n_perm: usize,
    pub elbow_threshold: f64,
    pub reference_path: Option<PathBuf>,
    pub probe: ProbeConfig,
    pub uq: UqConfig,
    pub steer: SteerSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            bundle_path: None,
            out_dir: PathBuf::from("repgeo-out"),
            seed: 0,
            min_correct: 100,
            metric: DissimMetric::Accuracy,
            significance_alpha: 0.05,
            layers: LayerSelection::Peak,
            mds_rank: 2,
            isomap_rank: 2,
            k_neighbors: KNeighbors::Auto,
            n_perm: 2000,
            elbow_threshold: 0.02,
            reference_path: None,
            probe: ProbeConfig::default(),
            uq: UqConfig::default(),
            steer: SteerSettings::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub bundle: Option<PathBuf>,
    pub seed: Option<u64>,
    pub layers: Option<LayerSelection>,
    pub metric: Option<DissimMetric>,
    pub rank: Option<usize>,
    pub k_neighbors: Option<KNeighbors>,
    pub perms: Option<usize>,
    pub reference: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::MissingInput(path.display().to_string()),
            _ => CliError::Io(format!("{}: {e}", path.display())),
        })?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(vec![format!("{}: {e}", path.display())]))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.bundle {
            self.bundle_path = Some(v.clone());
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.layers {
            self.layers = v.clone();
        }
        if let Some(v) = o.metric {
            self.metric = v;
        }
        if let Some(v) = o.rank {
            self.mds_rank = v;
            self.isomap_rank = v;
        }
        if let Some(v) = o.k_neighbors {
            self.k_neighbors = v;
        }
        if let Some(v) = o.perms {
            self.n_perm = v;
        }
        if let Some(v) = &o.reference {
            self.reference_path = Some(v.clone());
        }
        if let Some(v) = &o.out {
            self.out_dir = v.clone();
        }
    }

    /// Every violated field, in declaration order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.min_correct == 0 {
            v.push("min_correct must be at least 1".to_string());
        }
        if !(self.significance_alpha > 0.0 && self.significance_alpha < 1.0) {
            v.push(format!("significance_alpha must lie in (0, 1), got {}", self.significance_alpha));
        }
        if matches!(&self.layers, LayerSelection::List(l) if l.is_empty()) {
            v.push("layers list must not be empty".to_string());
        }
        if self.mds_rank == 0 {
            v.push("mds_rank must be at least 1".to_string());
        }
        if self.isomap_rank == 0 {
            v.push("isomap_rank must be at least 1".to_string());
        }
        if self.k_neighbors == KNeighbors::Fixed(0) {
            v.push("k_neighbors must be at least 1".to_string());
        }
        if self.n_perm == 0 {
            v.push("n_perm must be at least 1".to_string());
        }
        if !(self.elbow_threshold > 0.0) {
            v.push(format!("elbow_threshold must be positive, got {}", self.elbow_threshold));
        }
        let p = &self.probe;
        if !(p.test_fraction > 0.0 && p.test_fraction < 1.0) {
            v.push(format!("probe.test_fraction must lie in (0, 1), got {}", p.test_fraction));
        }
        if !(p.logistic.l2 >= 0.0 && p.logistic.l2.is_finite()) {
            v.push("probe.logistic.l2 must be finite and nonnegative".to_string());
        }
        if p.logistic.max_iter == 0 {
            v.push("probe.logistic.max_iter must be at least 1".to_string());
        }
        if !(p.logistic.tol > 0.0) {
            v.push("probe.logistic.tol must be positive".to_string());
        }
        let u = &self.uq;
        let test = 1.0 - u.train_fraction - u.val_fraction;
        if !(u.train_fraction > 0.0 && u.val_fraction > 0.0 && test > 1e-12) {
            v.push(format!(
                "uq fractions must be positive with train + val < 1 (train {}, val {})",
                u.train_fraction, u.val_fraction
            ));
        }
        if u.n_bins == 0 {
            v.push("uq.n_bins must be at least 1".to_string());
        }
        if self.steer.k == 0 {
            v.push("steer.K must be at least 1".to_string());
        }
        if !self.steer.alpha.is_finite() {
            v.push("steer.alpha must be finite".to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(v))
        }
    }
}
