//! Pipeline stages. Each command computes its artifacts in memory and writes
//! them only after every computation succeeded.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use repgeo::align::{intersect_labels, load_reference, procrustes_permutation_test};
use repgeo::bundle::{filter_labels, load_bundle, save_bundle};
use repgeo::dissim::{self, from_accuracy, from_cosine, gate_by_significance, load_matrix};
use repgeo::embed::{
    self, classical_mds, isomap, parse_embedding, residual_variance_elbow, spectrum_diagnostics,
    ElbowMethod, IsomapOptions, NeighborChoice,
};
use repgeo::probe::{accuracy_table_csv, grid_significance, load_grid, probe_grid, save_grid};
use repgeo::rng::SeedKey;
use repgeo::steer::{build_steering_set, save_steering};
use repgeo::synth::{generate, reference_coordinates, reference_csv};
use repgeo::uq::{margin_asymmetry_profile, reliability_csv, run_uq};
use repgeo::{
    AccuracyMapping, ActivationBundle, EmbeddingResult, ProbeGrid, ReferenceCoordinates,
    SteeringVectorSet, SyntheticSpec,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{DissimMetric, KNeighbors, LayerSelection, PipelineConfig};
use crate::error::CliError;
use crate::plot;

pub const PROBE_DIR: &str = "probe";
pub const DISSIM_DIR: &str = "dissim";
pub const EMBED_DIR: &str = "embed";
pub const ALIGN_DIR: &str = "align";
pub const UQ_DIR: &str = "uq";
pub const STEER_DIR: &str = "steer";
pub const PLOT_DIR: &str = "plots";
pub const SUMMARY_FILE: &str = "summary.json";

const METHODS: [&str; 2] = ["mds", "isomap"];

pub enum Artifact {
    File(PathBuf, Vec<u8>),
    Grid(PathBuf, ProbeGrid),
    Bundle(PathBuf, ActivationBundle),
    Steering(PathBuf, SteeringVectorSet),
}

/// Artifacts of one command (paths relative to the output directory), a
/// machine-readable report and human-readable summary lines.
pub struct Outputs {
    pub stage: &'static str,
    pub artifacts: Vec<Artifact>,
    pub report: Value,
    pub summary: Vec<String>,
}

impl Outputs {
    fn new(stage: &'static str) -> Self {
        Outputs { stage, artifacts: Vec::new(), report: Value::Null, summary: Vec::new() }
    }

    fn file(&mut self, path: impl Into<PathBuf>, bytes: impl Into<Vec<u8>>) {
        self.artifacts.push(Artifact::File(path.into(), bytes.into()));
    }

    fn json(&mut self, path: impl Into<PathBuf>, value: &impl Serialize) -> Result<(), CliError> {
        self.file(path, pretty(value)?);
        Ok(())
    }

    /// Relative paths of every file this command writes.
    pub fn paths(&self) -> Vec<PathBuf> {
        self.artifacts
            .iter()
            .map(|a| match a {
                Artifact::File(p, _) | Artifact::Grid(p, _) | Artifact::Bundle(p, _) | Artifact::Steering(p, _) => p.clone(),
            })
            .collect()
    }

    pub fn write(&self, root: &Path) -> Result<(), CliError> {
        for a in &self.artifacts {
            match a {
                Artifact::File(rel, bytes) => {
                    let path = root.join(rel);
                    if let Some(parent) = path.parent() {
                        fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
                    }
                    fs::write(&path, bytes).map_err(|e| io(&path, e))?;
                }
                Artifact::Grid(rel, g) => save_grid(g, root.join(rel))?,
                Artifact::Bundle(rel, b) => save_bundle(b, root.join(rel))?,
                Artifact::Steering(rel, s) => save_steering(s, root.join(rel))?,
            }
        }
        Ok(())
    }
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn pretty(value: &impl Serialize) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Malformed(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn read_text(path: &Path, what: &str) -> Result<String, CliError> {
    if !path.is_file() {
        return Err(CliError::MissingInput(format!("{what} `{}`", path.display())));
    }
    fs::read_to_string(path).map_err(|e| io(path, e))
}

fn bundle(cfg: &PipelineConfig) -> Result<ActivationBundle, CliError> {
    let path = cfg
        .bundle_path
        .as_ref()
        .ok_or_else(|| CliError::Config(vec!["bundle_path is required".into()]))?;
    if !path.exists() {
        return Err(CliError::MissingInput(format!("bundle `{}`", path.display())));
    }
    Ok(load_bundle(path)?)
}

fn grid(cfg: &PipelineConfig) -> Result<ProbeGrid, CliError> {
    let dir = cfg.out_dir.join(PROBE_DIR);
    if !dir.join(repgeo::probe::GRID_INDEX_FILE).is_file() {
        return Err(CliError::MissingInput(format!(
            "probe grid in `{}` (run `repgeo probe` first)",
            dir.display()
        )));
    }
    Ok(load_grid(dir)?)
}

fn reference(cfg: &PipelineConfig) -> Result<ReferenceCoordinates, CliError> {
    let path = cfg
        .reference_path
        .as_ref()
        .ok_or_else(|| CliError::Config(vec!["reference_path is required for alignment".into()]))?;
    Ok(load_reference(path)?)
}

/// Layer indices selected by the config for a grid.
pub fn resolve_layers(cfg: &PipelineConfig, grid: &ProbeGrid) -> Result<Vec<usize>, CliError> {
    match &cfg.layers {
        LayerSelection::All => Ok((0..grid.n_layers).collect()),
        LayerSelection::Peak => grid
            .peak_layer()
            .map(|l| vec![l])
            .ok_or_else(|| CliError::Insufficient("no layer has any trained probe".into())),
        LayerSelection::List(l) => {
            let bad: Vec<String> = l
                .iter()
                .filter(|&&v| v >= grid.n_layers)
                .map(|v| format!("layer {v} out of range (bundle has {} layers)", grid.n_layers))
                .collect();
            if bad.is_empty() {
                let mut l = l.clone();
                l.sort_unstable();
                l.dedup();
                Ok(l)
            } else {
                Err(CliError::Config(bad))
            }
        }
    }
}

fn dissim_path(layer: usize, ext: &str) -> PathBuf {
    PathBuf::from(DISSIM_DIR).join(format!("layer_{layer}.{ext}"))
}

fn embed_path(layer: usize, method: &str, ext: &str) -> PathBuf {
    PathBuf::from(EMBED_DIR).join(format!("layer_{layer}_{method}.{ext}"))
}

fn stage_seed(cfg: &PipelineConfig, stage: &str, layer: usize) -> u64 {
    SeedKey::new(cfg.seed).str(stage).int(layer as u64).finish()
}

pub fn cmd_probe(cfg: &PipelineConfig) -> Result<Outputs, CliError> {
    let bundle = bundle(cfg)?;
    let labels = filter_labels(&bundle, cfg.min_correct);
    if labels.labels.len() < 2 {
        return Err(CliError::Insufficient(format!(
            "{} label(s) have at least {} correct records; at least 2 required",
            labels.labels.len(),
            cfg.min_correct
        )));
    }
    let grid = probe_grid(&bundle, &labels, cfg.seed, &cfg.probe)?;
    let mut out = Outputs::new("probe");
    out.json(PathBuf::from(PROBE_DIR).join("labels.json"), &labels)?;
    out.file(PathBuf::from(PROBE_DIR).join("accuracy.csv"), accuracy_table_csv(&grid)?);
    let peak = grid.peak_layer();
    out.summary.push(format!(
        "probe: {} labels, {} layers, {} probes, {} absent cells",
        grid.labels.len(),
        grid.n_layers,
        grid.probes.len(),
        grid.absent.len()
    ));
    for (l, acc) in grid.mean_accuracy_by_layer.iter().enumerate() {
        if let Some(a) = acc {
            out.summary.push(format!("  layer {l}: mean test accuracy {a:.4}"));
        }
    }
    out.report = json!({
        "labels": grid.labels,
        "n_layers": grid.n_layers,
        "n_probes": grid.probes.len(),
        "n_absent": grid.absent.len(),
        "mean_accuracy_by_layer": grid.mean_accuracy_by_layer,
        "peak_layer": peak,
    });
    out.artifacts.push(Artifact::Grid(PathBuf::from(PROBE_DIR), grid));
    Ok(out)
}

#[derive(Serialize)]
struct SignificanceRow<'a> {
    label_a: &'a str,
    label_b: &'a str,
    observed_accuracy: f64,
    p_value: f64,
    n_perm: usize,
}

pub fn cmd_dissim(cfg: &PipelineConfig) -> Result<Outputs, CliError> {
    let grid = grid(cfg)?;
    let layers = resolve_layers(cfg, &grid)?;
    let needs_bundle = matches!(cfg.metric, DissimMetric::Cosine | DissimMetric::SignificanceGated);
    let bundle = if needs_bundle { Some(bundle(cfg)?) } else { None };
    let mut out = Outputs::new("dissim");
    let mut report = Vec::new();
    for &layer in &layers {
        let d = match cfg.metric {
            DissimMetric::Accuracy => from_accuracy(&grid, layer, AccuracyMapping::Accuracy)?,
            DissimMetric::AffineAccuracy => from_accuracy(&grid, layer, AccuracyMapping::AffineAccuracy)?,
            DissimMetric::Cosine => {
                let b = bundle.as_ref().expect("bundle loaded for cosine");
                let mut set = filter_labels(b, cfg.min_correct);
                set.labels = grid.labels.clone();
                from_cosine(b, &set, layer)?
            }
            DissimMetric::SignificanceGated => {
                let b = bundle.as_ref().expect("bundle loaded for gating");
                let base = from_accuracy(&grid, layer, AccuracyMapping::Accuracy)?;
                let sig = grid_significance(b, &grid, layer, cfg.n_perm, cfg.seed, &cfg.probe)?;
                let rows: Vec<SignificanceRow> = sig
                    .iter()
                    .map(|(k, s)| SignificanceRow {
                        label_a: &k.a,
                        label_b: &k.b,
                        observed_accuracy: s.observed_accuracy,
                        p_value: s.p_value,
                        n_perm: s.null_accuracies.len(),
                    })
                    .collect();
                out.json(PathBuf::from(DISSIM_DIR).join(format!("significance_layer_{layer}.json")), &rows)?;
                gate_by_significance(&base, &sig, cfg.significance_alpha)?
            }
        };
        out.file(dissim_path(layer, "json"), dissim::to_json(&d)?);
        out.file(dissim_path(layer, "csv"), dissim::to_csv(&d)?);
        out.summary.push(format!(
            "dissim: layer {layer}, {} labels, {} imputed pairs",
            d.len(),
            d.n_missing_pairs()
        ));
        report.push(json!({ "layer": layer, "n_labels": d.len(), "n_imputed_pairs": d.n_missing_pairs() }));
    }
    out.report = json!({ "metric": cfg.metric, "layers": report });
    Ok(out)
}

fn neighbor_choice(k: KNeighbors) -> NeighborChoice {
    match k {
        KNeighbors::Auto => NeighborChoice::Auto,
        KNeighbors::Fixed(k) => NeighborChoice::Fixed(k),
    }
}

fn embedding_points(r: &EmbeddingResult) -> embed::EmbeddingPoints {
    embed::EmbeddingPoints {
        labels: r.labels.clone(),
        coords: (0..r.coords.nrows()).map(|i| r.coords.row(i).iter().copied().collect()).collect(),
    }
}

pub fn cmd_embed(cfg: &PipelineConfig) -> Result<Outputs, CliError> {
    let grid = grid(cfg)?;
    let layers = resolve_layers(cfg, &grid)?;
    let reference = match &cfg.reference_path {
        Some(_) => Some(reference(cfg)?),
        None => None,
    };
    let mut out = Outputs::new("embed");
    let mut report = Vec::new();
    for &layer in &layers {
        let path = cfg.out_dir.join(dissim_path(layer, "json"));
        read_text(&path, "dissimilarity matrix")?;
        let d = load_matrix(&path)?;
        let n = d.len();
        for (what, rank) in [("mds_rank", cfg.mds_rank), ("isomap_rank", cfg.isomap_rank)] {
            if rank + 1 > n {
                return Err(CliError::Config(vec![format!(
                    "{what} = {rank} needs at least {} labels, layer {layer} has {n}",
                    rank + 1
                )]));
            }
        }
        let mds = classical_mds(&d, cfg.mds_rank)?;
        let iso = isomap(&d, &IsomapOptions { rank: cfg.isomap_rank, neighbors: neighbor_choice(cfg.k_neighbors) })?;
        let spectrum = if n >= 3 {
            Some(spectrum_diagnostics(&d, cfg.n_perm, stage_seed(cfg, "eigengap", layer))?)
        } else {
            None
        };
        let k_iso = iso.k_neighbors.expect("isomap records its neighbor count");
        let elbow_mds = residual_variance_elbow(&d, ElbowMethod::Mds, cfg.elbow_threshold)?;
        let elbow_iso = residual_variance_elbow(&d, ElbowMethod::Isomap { k_neighbors: k_iso }, cfg.elbow_threshold)?;
        out.json(
            PathBuf::from(EMBED_DIR).join(format!("layer_{layer}_elbow.json")),
            &json!({ "threshold": cfg.elbow_threshold, "mds": elbow_mds, "isomap": elbow_iso }),
        )?;
        for (method, r, spec) in [("mds", &mds, spectrum.as_ref()), ("isomap", &iso, None)] {
            out.file(embed_path(layer, method, "json"), embed::to_json(r, spec)?);
            out.file(embed_path(layer, method, "csv"), embed::to_csv(r)?);
            let title = format!("{method} layer {layer} (rank {})", r.rank);
            out.file(
                PathBuf::from(PLOT_DIR).join(format!("layer_{layer}_{method}.svg")),
                plot::scatter_svg(&embedding_points(r), reference.as_ref(), &title),
            );
        }
        let pr = spectrum.as_ref().and_then(|s| s.participation_ratio);
        let flagged = spectrum.as_ref().map(|s| s.flagged.clone()).unwrap_or_default();
        out.summary.push(format!(
            "embed: layer {layer}, trustworthiness mds {} / isomap {} (k = {k_iso}), participation ratio {}, flagged gaps {:?}",
            fmt_opt(mds.trustworthiness()),
            fmt_opt(iso.trustworthiness()),
            fmt_opt(pr),
            flagged
        ));
        report.push(json!({
            "layer": layer,
            "trustworthiness_mds": mds.trustworthiness(),
            "trustworthiness_isomap": iso.trustworthiness(),
            "k_neighbors": k_iso,
            "participation_ratio": pr,
            "flagged_gaps": flagged,
            "elbow_mds": elbow_mds.rank,
            "elbow_isomap": elbow_iso.rank,
        }));
    }
    out.report = Value::Array(report);
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

pub fn cmd_align(cfg: &PipelineConfig) -> Result<Outputs, CliError> {
    let reference = reference(cfg)?;
    let grid = grid(cfg)?;
    let layers = resolve_layers(cfg, &grid)?;
    let mut out = Outputs::new("align");
    let mut report = Vec::new();
    for &layer in &layers {
        for method in METHODS {
            let path = cfg.out_dir.join(embed_path(layer, method, "csv"));
            let pts = parse_embedding(&read_text(&path, "embedding")?)?;
            let width = pts.coords.first().map_or(0, Vec::len);
            if width < 2 {
                out.summary.push(format!("align: layer {layer} {method} skipped (rank {width} < 2)"));
                continue;
            }
            let coords = DMatrix::from_fn(pts.labels.len(), width, |i, j| pts.coords[i][j]);
            let (x, y, common) = intersect_labels(&pts.labels, &coords, &reference)?;
            let seed = SeedKey::new(cfg.seed).str("procrustes").int(layer as u64).str(method).finish();
            let mut r = procrustes_permutation_test(&x, &y, cfg.n_perm, seed)?;
            r.n_common_labels = common.len();
            out.json(PathBuf::from(ALIGN_DIR).join(format!("layer_{layer}_{method}.json")), &json!({
                "layer": layer,
                "method": method,
                "labels": common,
                "result": r,
            }))?;
            out.summary.push(format!(
                "align: layer {layer} {method}, R² {:.4} (p = {}), r_val {:.3}, r_aro {:.3}",
                r.r_squared,
                fmt_opt(r.p_value),
                r.r_val,
                r.r_aro
            ));
            report.push(json!({ "layer": layer, "method": method, "r_squared": r.r_squared, "p_value": r.p_value }));
        }
    }
    out.report = Value::Array(report);
    Ok(out)
}

#[derive(Serialize)]
struct MarginProfile {
    label_a: String,
    label_b: String,
    mean_distance_toward_output: Vec<f64>,
}

pub fn cmd_uq(cfg: &PipelineConfig) -> Result<Outputs, CliError> {
    let bundle = bundle(cfg)?;
    let grid = grid(cfg)?;
    let report = run_uq(&bundle, &grid, &cfg.uq, cfg.seed)?;
    let profiles: Vec<MarginProfile> = grid
        .pairs()
        .into_iter()
        .filter_map(|k| {
            margin_asymmetry_profile(&bundle, &grid, &k.a, &k.b).ok().map(|p| MarginProfile {
                label_a: k.a,
                label_b: k.b,
                mean_distance_toward_output: p,
            })
        })
        .collect();
    let mut out = Outputs::new("uq");
    out.json(PathBuf::from(UQ_DIR).join("report.json"), &json!({ "report": report, "margin_profiles": profiles }))?;
    if !report.reliability.is_empty() {
        out.file(PathBuf::from(UQ_DIR).join("reliability.csv"), reliability_csv(&report.reliability)?);
        out.file(
            PathBuf::from(PLOT_DIR).join("reliability.svg"),
            plot::reliability_svg(&report.reliability, "pooled reliability"),
        );
    }
    out.summary.push(format!(
        "uq: {} pair model(s), {} skipped",
        report.per_pair.len(),
        report.skipped.len()
    ));
    if let Some(p) = &report.pooled {
        out.summary.push(format!(
            "  pooled test: accuracy {:.4} (baseline {:.4}), AUC {:.4}, ECE {:.4}, n = {}",
            p.accuracy, p.baseline_accuracy, p.auc_roc, p.ece, p.n
        ));
    }
    out.report = json!({ "n_models": report.per_pair.len(), "n_skipped": report.skipped.len(), "pooled": report.pooled });
    Ok(out)
}

pub fn cmd_steer(cfg: &PipelineConfig) -> Result<Outputs, CliError> {
    let grid = grid(cfg)?;
    let s = &cfg.steer;
    let pick = |v: &Option<String>, i: usize| -> Result<String, CliError> {
        match v {
            Some(l) if grid.labels.contains(l) => Ok(l.clone()),
            Some(l) => Err(CliError::Config(vec![format!("steering label `{l}` is not in the probe grid")])),
            None => grid
                .labels
                .get(i)
                .cloned()
                .ok_or_else(|| CliError::Insufficient("probe grid has fewer than 2 labels".into())),
        }
    };
    let source = pick(&s.source, 0)?;
    let target = pick(&s.target, 1)?;
    let neutral = match &s.neutral {
        Some(_) => Some(pick(&s.neutral, 0)?),
        None => None,
    };
    let set = build_steering_set(&grid, &source, &target, neutral.as_deref(), s.k, s.alpha)?;
    let mut out = Outputs::new("steer");
    out.summary.push(format!(
        "steer: {source} -> {target}{}, layers {:?} (ranked by accuracy jump), alpha {}",
        neutral.as_ref().map_or(String::new(), |n| format!(" via {n}")),
        set.selected_layers,
        set.alpha
    ));
    out.report = json!({
        "source": source,
        "target": target,
        "neutral": neutral,
        "selected_layers": set.selected_layers,
        "degenerate_vectors": set.layers.iter().flat_map(|l| &l.vectors).filter(|v| v.degenerate).count(),
    });
    out.artifacts.push(Artifact::Steering(PathBuf::from(STEER_DIR), set));
    Ok(out)
}

/// Checks every input the full pipeline reads before anything is written.
pub fn preflight(cfg: &PipelineConfig) -> Result<(), CliError> {
    cfg.validate()?;
    match &cfg.bundle_path {
        None => return Err(CliError::Config(vec!["bundle_path is required".into()])),
        Some(p) if !p.exists() => {
            return Err(CliError::MissingInput(format!("bundle `{}`", p.display())))
        }
        Some(_) => {}
    }
    if let Some(p) = &cfg.reference_path {
        if !p.is_file() {
            return Err(CliError::MissingInput(format!("reference `{}`", p.display())));
        }
    }
    Ok(())
}

/// Runs every stage in order, writing each stage's artifacts before the next
/// reads them, then a combined `summary.json`.
pub fn cmd_all(cfg: &PipelineConfig) -> Result<Vec<Outputs>, CliError> {
    preflight(cfg)?;
    let mut stages: Vec<fn(&PipelineConfig) -> Result<Outputs, CliError>> =
        vec![cmd_probe, cmd_dissim, cmd_embed];
    if cfg.reference_path.is_some() {
        stages.push(cmd_align);
    }
    stages.push(cmd_uq);
    stages.push(cmd_steer);
    let mut done = Vec::new();
    for stage in stages {
        let out = stage(cfg)?;
        out.write(&cfg.out_dir)?;
        done.push(out);
    }
    let summary: BTreeMap<&str, &Value> = done.iter().map(|o| (o.stage, &o.report)).collect();
    let mut all = Outputs::new("all");
    all.json(SUMMARY_FILE, &json!({ "seed": cfg.seed, "stages": summary }))?;
    all.write(&cfg.out_dir)?;
    done.push(all);
    Ok(done)
}

/// Synthetic bundle plus its two-dimensional reference coordinates.
pub fn cmd_synth(spec: &SyntheticSpec, out_dir: &Path) -> Result<Outputs, CliError> {
    spec.validate()?;
    let bundle = generate(spec)?;
    let reference = reference_coordinates(spec)?;
    let mut out = Outputs::new("synth");
    out.json("spec.json", spec)?;
    out.file("reference.csv", reference_csv(&reference));
    out.summary.push(format!(
        "synth: {} ({} records, {} layers, hidden {}) -> {}",
        spec.scenario,
        bundle.n_records(),
        bundle.n_layers,
        bundle.hidden_dim,
        out_dir.join("bundle").display()
    ));
    out.artifacts.push(Artifact::Bundle(PathBuf::from("bundle"), bundle));
    Ok(out)
}

pub enum PlotMode {
    Scatter,
    Reliability,
}

/// Renders an embedding export or a reliability CSV.
pub fn cmd_plot(
    input: &Path,
    reference_path: Option<&Path>,
    mode: Option<PlotMode>,
) -> Result<String, CliError> {
    let text = read_text(input, "plot input")?;
    let mode = mode.unwrap_or_else(|| {
        if text.starts_with("bin_center,") {
            PlotMode::Reliability
        } else {
            PlotMode::Scatter
        }
    });
    let title = input.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    match mode {
        PlotMode::Reliability => Ok(plot::reliability_svg(&plot::parse_reliability_csv(&text)?, &title)),
        PlotMode::Scatter => {
            let pts = parse_embedding(&text)?;
            if pts.labels.is_empty() {
                return Err(CliError::Malformed(format!("`{}` has no points", input.display())));
            }
            let reference = match reference_path {
                Some(p) => Some(load_reference(p)?),
                None => None,
            };
            Ok(plot::scatter_svg(&pts, reference.as_ref(), &title))
        }
    }
}
