//! Orchestration of the conditioned-shape-model study: dataset generation, training of the
//! edge detector, shape model and baseline, inference, evaluation and the data-efficiency
//! sweep.

pub mod commands;
pub mod config;
pub mod error;
pub mod sweep;

pub use config::{StudyConfig, SweepConfig};
pub use error::{CliError, Result};

/// Worker threads from `CONDSHAPE_THREADS` (unset or 0 = one per core).
pub fn configure_threads() -> Result<usize> {
    let n = match std::env::var("CONDSHAPE_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::Config(format!("CONDSHAPE_THREADS must be a non-negative integer, got {v:?}")))?,
        Err(_) => 0,
    };
    // A second initialization (tests, embedding) keeps the existing pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(rayon::current_num_threads())
}
