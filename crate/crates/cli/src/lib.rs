//! Command-line pipeline over the `repgeo` toolkit.

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;

pub use commands::{cmd_align, cmd_all, cmd_dissim, cmd_embed, cmd_plot, cmd_probe, cmd_steer, cmd_synth, cmd_uq, Outputs};
pub use config::{Overrides, PipelineConfig};
pub use error::CliError;

/// Sizes the global worker pool from `REPGEO_THREADS` when set.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("REPGEO_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Config(vec![format!("REPGEO_THREADS must be a positive integer, got `{v}`")]))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(vec![format!("thread pool: {e}")]))
}
