//! Experiment and rate-study configuration, with provenance stamping.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mcmc::DramConfig;
use crate::mlsvgd::LevelSchedule;
use crate::problems::{CostMode, ProblemSpec};
use crate::svgd::SvgdConfig;

fn default_name() -> String {
    "experiment".into()
}
fn default_max_iterations() -> u64 {
    SvgdConfig::default().max_iterations
}
fn default_cost_mode() -> CostMode {
    CostMode::Measured
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub problem: ProblemSpec,
    /// Multilevel schedules to compare against the single-level baseline.
    pub schedules: Vec<LevelSchedule>,
    /// Baseline level; the finest level by default.
    #[serde(default)]
    pub baseline: Option<usize>,
    pub particles: usize,
    pub step_size: f64,
    pub bandwidth: f64,
    /// Tolerances `ε`; every schedule is run once per tolerance.
    pub tolerances: Vec<f64>,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: u64,
    pub seeds: Vec<u64>,
    pub init_mean: Vec<f64>,
    pub init_var: Vec<f64>,
    pub output_dir: PathBuf,
    #[serde(default = "default_cost_mode")]
    pub cost_mode: CostMode,
    #[serde(default)]
    pub dram: DramConfig,
    /// Particle-mean errors at which matched-cost speedups are reported.
    #[serde(default)]
    pub error_targets: Vec<f64>,
    /// Cached reference location; `<output_dir>/reference.json` by default.
    #[serde(default)]
    pub reference: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn baseline_level(&self) -> usize {
        self.baseline.unwrap_or_else(|| self.problem.levels())
    }

    pub fn svgd(&self, tolerance: f64) -> SvgdConfig {
        SvgdConfig {
            step_size: self.step_size,
            tolerance,
            max_iterations: self.max_iterations,
        }
    }

    pub fn reference_path(&self) -> PathBuf {
        self.reference
            .clone()
            .unwrap_or_else(|| self.output_dir.join("reference.json"))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.problem.validate()?;
        let levels = self.problem.levels();
        for s in &self.schedules {
            s.validate_for(levels).map_err(|e| Error::Config(e.to_string()))?;
        }
        let b = self.baseline_level();
        if b == 0 || b > levels {
            return bad(format!("baseline level {b} outside 1..={levels}"));
        }
        if self.particles == 0 {
            return bad("particles must be positive".into());
        }
        if !(self.bandwidth > 0.0) {
            return bad("bandwidth must be positive".into());
        }
        if self.tolerances.is_empty() {
            return bad("at least one tolerance is required".into());
        }
        for t in &self.tolerances {
            self.svgd(*t).validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        let d = problem_dim(&self.problem);
        if self.init_mean.len() != d || self.init_var.len() != d {
            return bad(format!("init_mean and init_var need {d} entries"));
        }
        if self.init_var.iter().any(|v| !(*v > 0.0)) {
            return bad("init_var entries must be positive".into());
        }
        if self.error_targets.iter().any(|v| !(*v > 0.0)) {
            return bad("error targets must be positive".into());
        }
        self.dram.validate()?;
        Ok(())
    }

    /// Hash of the canonical JSON form; stamped into every output.
    pub fn hash(&self) -> String {
        config_hash(self)
    }

    /// Hash of the parts that determine the MCMC reference.
    pub fn reference_hash(&self) -> String {
        config_hash(&(&self.problem, &self.dram, &self.init_mean))
    }
}

pub(crate) fn problem_dim(p: &ProblemSpec) -> usize {
    match p {
        ProblemSpec::DiffusionReaction(_) => 2,
        ProblemSpec::Beam(s) => s.dim,
        ProblemSpec::GaussianHierarchy(s) => s.dim,
    }
}

pub fn config_hash<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_vec(value).expect("config serializes");
    hex::encode(&Sha256::digest(&canonical)[..8])
}

/// Fields written into every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: Option<u64>,
    pub cost_mode: CostMode,
    pub generator: String,
    pub noise_convention: Option<String>,
    pub cost_weights: Vec<f64>,
}

fn default_rate_samples() -> usize {
    1000
}
fn default_decay_particles() -> usize {
    200
}
fn default_decay_iterations() -> u64 {
    300
}
fn default_decay_step() -> f64 {
    0.1
}
fn default_decay_bandwidth() -> f64 {
    1.0
}

/// Settings for the `rates` study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatesConfig {
    /// The last level serves as proxy target for the KL estimates on
    /// posterior hierarchies.
    pub problem: ProblemSpec,
    pub output_dir: PathBuf,
    #[serde(default = "default_cost_mode")]
    pub cost_mode: CostMode,
    /// Samples per level for the KL estimate.
    #[serde(default = "default_rate_samples")]
    pub samples: usize,
    /// Chain settings for drawing level samples; `samples` is overridden.
    #[serde(default)]
    pub dram: DramConfig,
    #[serde(default)]
    pub chain_start: Option<Vec<f64>>,
    /// SVGD run on the limit Gaussian used for the decay-rate fit.
    #[serde(default = "default_decay_particles")]
    pub decay_particles: usize,
    #[serde(default = "default_decay_iterations")]
    pub decay_iterations: u64,
    #[serde(default = "default_decay_step")]
    pub decay_step_size: f64,
    #[serde(default = "default_decay_bandwidth")]
    pub decay_bandwidth: f64,
    #[serde(default)]
    pub seed: u64,
}

impl RatesConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.problem.validate()?;
        if self.problem.levels() < 3 {
            return Err(Error::Config("rate fits need at least 3 levels".into()));
        }
        if let ProblemSpec::DiffusionReaction(_) | ProblemSpec::Beam(_) = self.problem {
            if self.problem.levels() < 4 {
                return Err(Error::Config(
                    "posterior rate fits need 4 levels: 3 fitted plus the proxy target".into(),
                ));
            }
        }
        if !(self.decay_step_size > 0.0) || !(self.decay_bandwidth > 0.0) {
            return Err(Error::Config("decay step size and bandwidth must be positive".into()));
        }
        if self.samples < 10 || self.decay_iterations < 3 {
            return Err(Error::Config("samples, decay_particles or decay_iterations too small".into()));
        }
        self.dram.validate()
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::GaussianHierarchySpec;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            name: "t".into(),
            problem: ProblemSpec::GaussianHierarchy(GaussianHierarchySpec::default()),
            schedules: vec![LevelSchedule::new(vec![1, 2, 3]).unwrap()],
            baseline: None,
            particles: 20,
            step_size: 0.1,
            bandwidth: 1.0,
            tolerances: vec![1e-3],
            max_iterations: 1000,
            seeds: vec![0, 1],
            init_mean: vec![3.0],
            init_var: vec![0.1],
            output_dir: "out".into(),
            cost_mode: CostMode::Analytic,
            dram: DramConfig::default(),
            error_targets: vec![],
            reference: None,
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let c = small();
        let json = c.to_json().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json().unwrap(), json);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn hash_tracks_content() {
        let a = small();
        let mut b = small();
        b.seeds.push(7);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        // the reference does not depend on the seeds
        assert_eq!(a.reference_hash(), b.reference_hash());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = small();
        c.seeds = vec![1, 1];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = small();
        c.init_mean = vec![0.0, 0.0];
        assert!(c.validate().is_err());
        let mut c = small();
        c.baseline = Some(4);
        assert!(c.validate().is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn defaults_fill_in() {
        let json = r#"{
            "problem": {"kind": "gaussian_hierarchy"},
            "schedules": [[1, 3]],
            "particles": 10, "step_size": 0.1, "bandwidth": 1.0,
            "tolerances": [1e-3], "seeds": [0],
            "init_mean": [1.0], "init_var": [1.0],
            "output_dir": "x"
        }"#;
        let c: ExperimentConfig = serde_json::from_str(json).unwrap();
        c.validate().unwrap();
        assert_eq!(c.baseline_level(), 3);
        assert_eq!(c.cost_mode, CostMode::Measured);
        assert_eq!(c.reference_path(), PathBuf::from("x/reference.json"));
    }
}
