use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use repgeo::{Scenario, SyntheticSpec};
use repgeo_cli::commands::{self, PlotMode};
use repgeo_cli::config::{DissimMetric, KNeighbors, LayerSelection};
use repgeo_cli::{CliError, Outputs, Overrides, PipelineConfig};

#[derive(Parser)]
#[command(name = "repgeo", version, about = "Geometry of label representations in layer activations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Activation bundle directory.
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// `all`, `peak` or a comma-separated list of layer indices.
    #[arg(long)]
    layers: Option<LayerSelection>,
    /// accuracy, affine_accuracy, cosine or significance_gated.
    #[arg(long)]
    metric: Option<DissimMetric>,
    /// Embedding rank for both MDS and Isomap.
    #[arg(long)]
    rank: Option<usize>,
    /// `auto` or a fixed neighbor count.
    #[arg(long = "k-neighbors")]
    k_neighbors: Option<KNeighbors>,
    /// Replicates of every permutation test.
    #[arg(long)]
    perms: Option<usize>,
    /// Reference (valence, arousal) CSV.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train pairwise probes for every layer.
    Probe(Common),
    /// Build dissimilarity matrices at the selected layers.
    Dissim(Common),
    /// MDS and Isomap embeddings with diagnostics.
    Embed(Common),
    /// Procrustes alignment of embeddings to reference coordinates.
    Align(Common),
    /// Correctness prediction from hyperplane distances.
    Uq(Common),
    /// Steering vectors from probe hyperplanes.
    Steer(Common),
    /// Every stage in order.
    All(Common),
    /// Write a synthetic bundle and its reference coordinates.
    Synth(SynthArgs),
    /// Render an embedding or reliability CSV as SVG.
    Plot(PlotArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Smoke,
    GaussianClusters,
    ParabolaV,
    FlatLine,
    NoiseBulk,
    UqBoundary,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "smoke")]
    scenario: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_labels: Option<usize>,
    #[arg(long)]
    n_per_label: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Scatter,
    Reliability,
}

#[derive(Args)]
struct PlotArgs {
    /// Embedding CSV/JSON or reliability CSV.
    input: PathBuf,
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Detected from the input header when omitted.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Output SVG file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn config(c: &Common) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.apply(&Overrides {
        bundle: c.bundle.clone(),
        seed: c.seed,
        layers: c.layers.clone(),
        metric: c.metric,
        rank: c.rank,
        k_neighbors: c.k_neighbors,
        perms: c.perms,
        reference: c.reference.clone(),
        out: c.out.clone(),
    });
    cfg.validate()?;
    Ok(cfg)
}

fn stage(c: &Common, f: fn(&PipelineConfig) -> Result<Outputs, CliError>) -> Result<(), CliError> {
    let cfg = config(c)?;
    let out = f(&cfg)?;
    out.write(&cfg.out_dir)?;
    report(&out);
    Ok(())
}

fn report(out: &Outputs) {
    for line in &out.summary {
        println!("{line}");
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    repgeo_cli::init_threads()?;
    match cli.command {
        Command::Probe(c) => stage(&c, commands::cmd_probe),
        Command::Dissim(c) => stage(&c, commands::cmd_dissim),
        Command::Embed(c) => stage(&c, commands::cmd_embed),
        Command::Align(c) => stage(&c, commands::cmd_align),
        Command::Uq(c) => stage(&c, commands::cmd_uq),
        Command::Steer(c) => stage(&c, commands::cmd_steer),
        Command::All(c) => {
            let cfg = config(&c)?;
            for out in commands::cmd_all(&cfg)? {
                report(&out);
            }
            println!("artifacts written to {}", cfg.out_dir.display());
            Ok(())
        }
        Command::Synth(a) => {
            let mut spec = match a.scenario {
                Preset::Smoke => SyntheticSpec::smoke(),
                Preset::GaussianClusters => SyntheticSpec::preset(Scenario::GaussianClusters),
                Preset::ParabolaV => SyntheticSpec::preset(Scenario::ParabolaV),
                Preset::FlatLine => SyntheticSpec::preset(Scenario::FlatLine),
                Preset::NoiseBulk => SyntheticSpec::preset(Scenario::NoiseBulk),
                Preset::UqBoundary => SyntheticSpec::preset(Scenario::UqBoundary),
            };
            spec.seed = a.seed;
            spec.n_labels = a.n_labels.unwrap_or(spec.n_labels);
            spec.n_per_label = a.n_per_label.unwrap_or(spec.n_per_label);
            spec.hidden_dim = a.hidden_dim.unwrap_or(spec.hidden_dim);
            spec.n_layers = a.n_layers.unwrap_or(spec.n_layers);
            let out = commands::cmd_synth(&spec, &a.out)?;
            out.write(&a.out)?;
            report(&out);
            Ok(())
        }
        Command::Plot(a) => {
            let mode = a.mode.map(|m| match m {
                Mode::Scatter => PlotMode::Scatter,
                Mode::Reliability => PlotMode::Reliability,
            });
            let svg = commands::cmd_plot(&a.input, a.reference.as_deref(), mode)?;
            match &a.out {
                Some(p) => std::fs::write(p, svg).map_err(|e| CliError::Io(format!("{}: {e}", p.display()))),
                None => {
                    print!("{svg}");
                    Ok(())
                }
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
