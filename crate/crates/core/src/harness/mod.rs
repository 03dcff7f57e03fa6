//! Experiment orchestration: configs, replicated runs, the cached MCMC
//! reference, summaries and rate studies.

pub mod config;
pub mod experiment;
pub mod rates;
pub mod reference;
pub mod summary;

use std::path::Path;

use crate::error::Result;

pub use config::{config_hash, ExperimentConfig, Provenance, RatesConfig};
pub use experiment::{run_experiment, ExperimentOutcome, RunFile, RunOptions};
pub use rates::{run_rates, RatesReport};
pub use reference::{compute_reference, load_or_compute_reference, read_reference, write_reference, Reference};
pub use summary::{summarize, Summary};

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
