//! The cached DRAM reference on the finest level.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Provenance};
use super::write_atomic;
use crate::error::Result;
use crate::mcmc::{dram_sample, Chain, ChainSummary};
use crate::problems::Problem;
use crate::rng::GENERATOR;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub provenance: Provenance,
    /// Hash of problem, chain settings and start; decides cache validity.
    pub reference_hash: String,
    pub level: usize,
    pub chain: ChainSummary,
    pub wall_seconds: f64,
}

/// Runs the chain on the finest level of `problem`.
pub fn compute_reference(cfg: &ExperimentConfig, problem: &Problem) -> Result<(Reference, Chain)> {
    let levels = problem.fresh_levels()?;
    let target = levels.last().expect("nonempty hierarchy").as_ref();
    let started = Instant::now();
    let chain = dram_sample(target, &cfg.init_mean, &cfg.dram)?;
    if chain.stuck {
        log::warn!("reference chain flagged stuck");
    }
    let reference = Reference {
        provenance: Provenance {
            config_hash: cfg.hash(),
            seed: Some(cfg.dram.seed),
            cost_mode: cfg.cost_mode,
            generator: GENERATOR.to_string(),
            noise_convention: problem.data.as_ref().map(|d| d.noise_convention.clone()),
            cost_weights: problem.cost_weights.clone(),
        },
        reference_hash: cfg.reference_hash(),
        level: target.level(),
        chain: chain.summary(&cfg.dram),
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((reference, chain))
}

pub fn read_reference(path: &Path) -> Result<Reference> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn write_reference(path: &Path, reference: &Reference) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_atomic(path, serde_json::to_string_pretty(reference)?.as_bytes())
}

/// Reuses the cached reference when its hash matches, otherwise recomputes
/// and caches it.
pub fn load_or_compute_reference(cfg: &ExperimentConfig, problem: &Problem) -> Result<Reference> {
    let path = cfg.reference_path();
    if path.exists() {
        match read_reference(&path) {
            Ok(r) if r.reference_hash == cfg.reference_hash() => return Ok(r),
            Ok(_) => log::info!("{}: stale reference, recomputing", path.display()),
            Err(e) => log::warn!("{}: unreadable reference ({e}), recomputing", path.display()),
        }
    }
    let (reference, _) = compute_reference(cfg, problem)?;
    write_reference(&path, &reference)?;
    Ok(reference)
}
