//! Unit steering directions from probe hyperplanes and their on-disk format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bundle::{decode_f32, encode_f32};
use crate::error::{Error, Result};
use crate::probe::ProbeGrid;

pub const EPSILON: f64 = 1e-8;
pub const HEADER_FILE: &str = "header.json";
pub const PAYLOAD_FILE: &str = "vectors.f32";

/// `beta / (||beta|| + ε)`, with a flag set when the result is not unit-norm
/// (zero or vanishing `beta`).
pub fn normalize_direction(beta: &[f64]) -> (Vec<f64>, bool) {
    let norm = beta.iter().map(|v| v * v).sum::<f64>().sqrt();
    let v: Vec<f64> = beta.iter().map(|b| b / (norm + EPSILON)).collect();
    let out_norm = norm / (norm + EPSILON);
    (v, out_norm < 1.0 - 1e-6)
}

/// Top-`k` layers by accuracy jump `acc[l] - acc[l-1]`, in ranked order.
/// Jumps within 1e-12 of each other count as ties and go to the earlier layer.
pub fn select_layers(profile: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || profile.len() < k + 1 {
        return Err(Error::invalid(format!(
            "K = {k} needs 1 <= K <= {} for a profile of {} layers",
            profile.len().saturating_sub(1),
            profile.len()
        )));
    }
    let mut remaining: Vec<(usize, f64)> = (1..profile.len())
        .map(|l| (l, profile[l] - profile[l - 1]))
        .collect();
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let top = remaining.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
        let pos = remaining
            .iter()
            .position(|r| r.1 >= top - 1e-12)
            .expect("non-empty candidates");
        out.push(remaining.remove(pos).0);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Direct,
    NeutralFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    pub from: String,
    pub to: String,
    /// Float offset of this vector in the payload.
    pub offset: usize,
    pub degenerate: bool,
    #[serde(skip)]
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringLayer {
    pub layer: usize,
    pub alpha: f64,
    /// Applied in order.
    pub vectors: Vec<SteeringVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringVectorSet {
    pub source: String,
    pub target: String,
    pub route: Route,
    pub alpha: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub hidden_dim: usize,
    pub layers: Vec<SteeringLayer>,
    pub selected_layers: Vec<usize>,
}

/// Direction at `layer` pointing from the `from` side to the `to` side.
fn direction(grid: &ProbeGrid, from: &str, to: &str, layer: usize, offset: usize) -> Result<SteeringVector> {
    let (probe, reversed) = grid.probe(from, to, layer).ok_or_else(|| {
        Error::InsufficientData(format!("no probe for ({from}, {to}) at layer {layer}"))
    })?;
    if probe.weights.len() != grid.hidden_dim {
        return Err(Error::DimensionMismatch {
            context: format!("probe weights ({from}, {to}) layer {layer}"),
            expected: grid.hidden_dim,
            found: probe.weights.len(),
        });
    }
    let sign = if reversed { -1.0 } else { 1.0 };
    let beta: Vec<f64> = probe.weights.iter().map(|w| sign * w).collect();
    let (v, degenerate) = normalize_direction(&beta);
    Ok(SteeringVector {
        from: from.to_string(),
        to: to.to_string(),
        offset,
        degenerate,
        values: if degenerate { vec![0.0; v.len()] } else { v.iter().map(|&x| x as f32).collect() },
    })
}

/// Steering vectors for `source → target` at the `k` layers with the largest
/// accuracy jumps of that pair. With `neutral`, each layer stores the
/// `source → neutral` and `neutral → target` directions, each scaled by `alpha`.
pub fn build_steering_set(
    grid: &ProbeGrid,
    source: &str,
    target: &str,
    neutral: Option<&str>,
    k: usize,
    alpha: f64,
) -> Result<SteeringVectorSet> {
    if source == target {
        return Err(Error::invalid("source and target labels must differ"));
    }
    if !alpha.is_finite() {
        return Err(Error::invalid("alpha must be finite"));
    }
    let profile = grid
        .accuracy_profile(source, target)
        .into_iter()
        .enumerate()
        .map(|(l, a)| {
            a.ok_or_else(|| {
                Error::InsufficientData(format!("no probe for ({source}, {target}) at layer {l}"))
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    let selected = select_layers(&profile, k)?;
    let mut ordered = selected.clone();
    ordered.sort_unstable();
    let legs: Vec<(&str, &str)> = match neutral {
        None => vec![(source, target)],
        Some(n) if n == source || n == target => {
            return Err(Error::invalid("neutral label must differ from source and target"))
        }
        Some(n) => vec![(source, n), (n, target)],
    };
    let mut offset = 0;
    let mut layers = Vec::with_capacity(ordered.len());
    for &layer in &ordered {
        let mut vectors = Vec::with_capacity(legs.len());
        for &(from, to) in &legs {
            vectors.push(direction(grid, from, to, layer, offset)?);
            offset += grid.hidden_dim;
        }
        layers.push(SteeringLayer { layer, alpha, vectors });
    }
    Ok(SteeringVectorSet {
        source: source.to_string(),
        target: target.to_string(),
        route: if neutral.is_some() { Route::NeutralFirst } else { Route::Direct },
        alpha,
        k,
        hidden_dim: grid.hidden_dim,
        layers,
        selected_layers: selected,
    })
}

/// Writes `header.json` and the little-endian f32 payload into `dir`.
pub fn save_steering(set: &SteeringVectorSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut payload = Vec::new();
    for v in set.layers.iter().flat_map(|l| &l.vectors) {
        if v.offset != payload.len() || v.values.len() != set.hidden_dim {
            return Err(Error::invalid("steering vector offsets are inconsistent"));
        }
        payload.extend_from_slice(&v.values);
    }
    let mut json = serde_json::to_string_pretty(set)?;
    json.push('\n');
    let header = dir.join(HEADER_FILE);
    fs::write(&header, json).map_err(|e| Error::io(&header, e))?;
    let file = dir.join(PAYLOAD_FILE);
    fs::write(&file, encode_f32(&payload)).map_err(|e| Error::io(&file, e))
}

pub fn load_steering(dir: impl AsRef<Path>) -> Result<SteeringVectorSet> {
    let dir = dir.as_ref();
    let header = dir.join(HEADER_FILE);
    let payload = dir.join(PAYLOAD_FILE);
    for p in [&header, &payload] {
        if !p.is_file() {
            return Err(Error::MissingFile(p.clone()));
        }
    }
    let text = fs::read_to_string(&header).map_err(|e| Error::io(&header, e))?;
    let mut set: SteeringVectorSet = serde_json::from_str(&text)?;
    let bytes = fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
    let n_vectors: usize = set.layers.iter().map(|l| l.vectors.len()).sum();
    let expected = n_vectors * set.hidden_dim;
    if bytes.len() != expected * 4 {
        return Err(Error::DimensionMismatch {
            context: format!("{} (floats)", payload.display()),
            expected,
            found: bytes.len() / 4,
        });
    }
    let values = decode_f32(&bytes);
    for v in set.layers.iter_mut().flat_map(|l| l.vectors.iter_mut()) {
        let end = v.offset + set.hidden_dim;
        if end > values.len() {
            return Err(Error::invalid("steering vector offset beyond payload"));
        }
        v.values = values[v.offset..end].to_vec();
    }
    Ok(set)
}
