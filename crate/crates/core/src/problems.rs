//! Benchmark problems: synthetic data, priors, and posterior hierarchies for
//! the diffusion-reaction and beam models, plus an analytic Gaussian
//! hierarchy with planted rates.

use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bayes::{GaussianLikelihood, Prior, DEFAULT_FD_STEP};
use crate::divergence::GaussianDist;
use crate::error::{Error, Result};
use crate::forward::beam::{observe_beam, solve_beam_nodal, BeamGrid, BeamModel, StiffnessField};
use crate::forward::diffusion_reaction::{DiffusionReactionModel, NewtonConfig};
use crate::forward::ForwardModel;
use crate::rng::seeded;
use crate::target::{GaussianTarget, TargetLevel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// Median wall time of a score evaluation, measured before the run.
    Measured,
    /// Fixed weights from the discretization size, normalized to `c₁ = 1`.
    Analytic,
}

impl std::str::FromStr for CostMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "measured" => Ok(CostMode::Measured),
            "analytic" => Ok(CostMode::Analytic),
            other => Err(Error::Config(format!("unknown cost mode '{other}'"))),
        }
    }
}

fn default_dr_levels() -> usize {
    3
}
fn default_dr_theta() -> Vec<f64> {
    vec![-PI / 4.0, 3.0]
}
// At 0.5% the posterior is so narrow that δ = 0.1 is unstable.
fn default_dr_noise() -> f64 {
    0.05
}
fn default_dr_prior() -> Prior {
    Prior::Gaussian(crate::bayes::GaussianPrior {
        mean: vec![PI / 2.0, 1.5],
        diag_cov: vec![50.0, 0.5],
    })
}
fn default_fd_step() -> f64 {
    DEFAULT_FD_STEP
}
fn default_beam_levels() -> usize {
    6
}
fn default_beam_dim() -> usize {
    9
}
// Smaller noise puts the root-segment curvature past what δ = 1e-2 can step
// through; the ensemble then oscillates instead of converging.
fn default_beam_noise() -> f64 {
    0.07
}
fn default_beam_data_nodes() -> usize {
    1001
}
fn default_mu() -> f64 {
    1.0
}
fn default_sigma() -> f64 {
    0.05
}
fn default_base() -> f64 {
    2.0
}
fn default_two() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionReactionSpec {
    #[serde(default = "default_dr_levels")]
    pub levels: usize,
    /// Data level; defaults to one above the finest inference level.
    #[serde(default)]
    pub data_level: Option<usize>,
    #[serde(default = "default_dr_theta")]
    pub theta_true: Vec<f64>,
    /// Noise std as a fraction of `max_i |G(θ*)_i|`.
    #[serde(default = "default_dr_noise")]
    pub noise_fraction: f64,
    #[serde(default)]
    pub noise_seed: u64,
    #[serde(default = "default_dr_prior")]
    pub prior: Prior,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default)]
    pub newton: NewtonConfig,
}

impl Default for DiffusionReactionSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamSpec {
    #[serde(default = "default_beam_levels")]
    pub levels: usize,
    #[serde(default = "default_beam_dim")]
    pub dim: usize,
    #[serde(default = "default_beam_noise")]
    pub noise_fraction: f64,
    #[serde(default)]
    pub noise_seed: u64,
    /// Seed of the ground-truth stiffness draw from the prior.
    #[serde(default)]
    pub truth_seed: u64,
    /// Explicit ground truth; overrides the prior draw.
    #[serde(default)]
    pub theta_true: Option<Vec<f64>>,
    #[serde(default = "default_beam_data_nodes")]
    pub data_nodes: usize,
    #[serde(default = "default_mu")]
    pub prior_mu: f64,
    #[serde(default = "default_sigma")]
    pub prior_sigma: f64,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
}

impl Default for BeamSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

/// `π = N(0, I_d)`, `π^(ℓ) = N(m_ℓ, I_d)` with `KL(π^(ℓ) ‖ π) = k₁ s^(−αℓ)`
/// and analytic costs `c_ℓ = s^(γℓ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianHierarchySpec {
    #[serde(default = "default_dr_levels")]
    pub levels: usize,
    #[serde(default = "default_one_usize")]
    pub dim: usize,
    #[serde(default = "default_base")]
    pub base: f64,
    #[serde(default = "default_two")]
    pub alpha: f64,
    #[serde(default = "default_two")]
    pub gamma: f64,
    #[serde(default = "default_one")]
    pub k1: f64,
}

fn default_one() -> f64 {
    1.0
}
fn default_one_usize() -> usize {
    1
}

impl Default for GaussianHierarchySpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl GaussianHierarchySpec {
    pub fn level_mean(&self, level: usize) -> Vec<f64> {
        // KL(N(m,I) ‖ N(0,I)) = |m|²/2, put all the shift in the first coordinate.
        let shift = (2.0 * self.k1 * self.base.powf(-self.alpha * level as f64)).sqrt();
        let mut m = vec![0.0; self.dim];
        m[0] = shift;
        m
    }

    pub fn planted_kl(&self, level: usize) -> f64 {
        self.k1 * self.base.powf(-self.alpha * level as f64)
    }

    pub fn planted_cost(&self, level: usize) -> f64 {
        self.base.powf(self.gamma * level as f64)
    }

    pub fn limit(&self) -> GaussianDist {
        GaussianDist::diagonal(vec![0.0; self.dim], vec![1.0; self.dim]).expect("unit covariance")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemSpec {
    DiffusionReaction(DiffusionReactionSpec),
    Beam(BeamSpec),
    GaussianHierarchy(GaussianHierarchySpec),
}

impl ProblemSpec {
    pub fn levels(&self) -> usize {
        match self {
            ProblemSpec::DiffusionReaction(s) => s.levels,
            ProblemSpec::Beam(s) => s.levels,
            ProblemSpec::GaussianHierarchy(s) => s.levels,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ProblemSpec::DiffusionReaction(_) => "diffusion_reaction",
            ProblemSpec::Beam(_) => "beam",
            ProblemSpec::GaussianHierarchy(_) => "gaussian_hierarchy",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        match self {
            ProblemSpec::DiffusionReaction(s) => {
                if s.levels == 0 || s.levels > 6 {
                    return bad("diffusion-reaction levels must be in 1..=6");
                }
                if let Some(d) = s.data_level {
                    if d == 0 || d > 7 {
                        return bad("diffusion-reaction data level must be in 1..=7");
                    }
                }
                if s.theta_true.len() != 2 || s.prior.dim() != 2 {
                    return bad("diffusion-reaction has two parameters");
                }
                if !(s.noise_fraction > 0.0) || !(s.fd_step > 0.0) {
                    return bad("noise fraction and fd step must be positive");
                }
                s.prior.validate().map_err(|e| Error::Config(e.to_string()))?;
                s.newton.validate().map_err(|e| Error::Config(e.to_string()))?;
            }
            ProblemSpec::Beam(s) => {
                if s.levels == 0 || s.levels > 20 || s.dim == 0 {
                    return bad("beam needs 1..=20 levels and a positive dimension");
                }
                if s.data_nodes < 3 {
                    return bad("beam data grid needs at least 3 nodes");
                }
                if let Some(t) = &s.theta_true {
                    if t.len() != s.dim || t.iter().any(|v| !(*v > 0.0)) {
                        return bad("beam ground truth must be positive with length dim");
                    }
                }
                if !(s.noise_fraction > 0.0) || !(s.fd_step > 0.0) || !(s.prior_sigma > 0.0) {
                    return bad("noise fraction, fd step and prior sigma must be positive");
                }
            }
            ProblemSpec::GaussianHierarchy(s) => {
                if s.levels == 0 || s.dim == 0 || !(s.base > 1.0) || !(s.k1 > 0.0) {
                    return bad("gaussian hierarchy needs levels, dim > 0, base > 1, k1 > 0");
                }
            }
        }
        Ok(())
    }
}

/// Synthetic observations and the truth that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub theta_true: Vec<f64>,
    pub noiseless: Vec<f64>,
    pub likelihood: GaussianLikelihood,
    pub noise_std: f64,
    pub noise_convention: String,
}

fn add_noise(noiseless: Vec<f64>, fraction: f64, seed: u64, theta_true: Vec<f64>) -> Result<SyntheticData> {
    let scale = noiseless.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let std = fraction * scale;
    if !(std > 0.0) {
        return Err(Error::Config("noiseless data vanish; cannot scale the noise".into()));
    }
    let mut rng = seeded(seed);
    let data = noiseless
        .iter()
        .map(|g| g + std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let m = noiseless.len();
    Ok(SyntheticData {
        theta_true,
        likelihood: GaussianLikelihood::new(data, vec![std * std; m])?,
        noiseless,
        noise_std: std,
        noise_convention: format!("std = {fraction} * max|G(theta_true)|"),
    })
}

pub fn diffusion_reaction_data(spec: &DiffusionReactionSpec) -> Result<SyntheticData> {
    let level = spec.data_level.unwrap_or(spec.levels + 1);
    let model = DiffusionReactionModel::new(level as u32, spec.newton)?;
    let g = model.evaluate(&spec.theta_true)?;
    add_noise(g, spec.noise_fraction, spec.noise_seed, spec.theta_true.clone())
}

/// Ground-truth stiffness plateaus: explicit, or one draw from the prior.
pub fn beam_truth(spec: &BeamSpec) -> Result<Vec<f64>> {
    if let Some(t) = &spec.theta_true {
        return Ok(t.clone());
    }
    let prior = Prior::log_normal(spec.prior_mu, spec.prior_sigma, spec.dim)?;
    Ok(prior.sample(&mut seeded(spec.truth_seed)))
}

pub fn beam_data(spec: &BeamSpec) -> Result<SyntheticData> {
    let truth = beam_truth(spec)?;
    let field = StiffnessField::new(truth.clone())?;
    let grid = BeamGrid::with_nodes(spec.data_nodes, 0)?;
    let stiffness: Vec<f64> = (0..grid.nodes).map(|k| field.piecewise(grid.x(k))).collect();
    let u = solve_beam_nodal(&grid, &stiffness)?;
    add_noise(observe_beam(&u, &grid), spec.noise_fraction, spec.noise_seed, truth)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median wall time of `reps` score evaluations at `theta`, in seconds.
pub fn measure_score_cost(target: &dyn TargetLevel, theta: &[f64], reps: usize) -> Result<f64> {
    let mut times = Vec::with_capacity(reps.max(1));
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        target.score(theta)?;
        times.push(t.elapsed().as_secs_f64());
    }
    Ok(median(times))
}

/// A built problem: the posterior hierarchy (level `k+1` at index `k`) and
/// its provenance.
pub struct Problem {
    pub spec: ProblemSpec,
    pub levels: Vec<Box<dyn TargetLevel>>,
    pub data: Option<SyntheticData>,
    pub cost_mode: CostMode,
    pub cost_weights: Vec<f64>,
}

impl Problem {
    pub fn hierarchy(&self) -> Vec<&dyn TargetLevel> {
        self.levels.iter().map(|l| l.as_ref()).collect()
    }

    pub fn dim(&self) -> usize {
        self.levels[0].dim()
    }

    /// A second, independent copy of the hierarchy with the same data and
    /// weights. Concurrent runs need their own counters and solver caches.
    pub fn fresh_levels(&self) -> Result<Vec<Box<dyn TargetLevel>>> {
        build_levels(&self.spec, self.data.as_ref(), &self.cost_weights)
    }
}

fn analytic_weights(spec: &ProblemSpec) -> Vec<f64> {
    let n = spec.levels();
    match spec {
        // Banded Newton solves on an m×m interior grid grow like h⁻³.
        ProblemSpec::DiffusionReaction(_) => (0..n).map(|k| 8f64.powi(k as i32)).collect(),
        // Pentadiagonal solves are linear in the node count.
        ProblemSpec::Beam(_) => (1..=n as u32)
            .map(|l| BeamGrid::new(l).map_or(f64::NAN, |g| g.nodes as f64 / 51.0))
            .collect(),
        ProblemSpec::GaussianHierarchy(s) => (1..=n).map(|l| s.planted_cost(l)).collect(),
    }
}

fn posterior_levels(
    prior: &Prior,
    data: &SyntheticData,
    models: Vec<Box<dyn ForwardModel>>,
    fd_step: f64,
    weights: &[f64],
) -> Result<Vec<Box<dyn TargetLevel>>> {
    let lik = Arc::new(data.likelihood.clone());
    Ok(crate::bayes::make_hierarchy(prior, lik, models, fd_step, weights)?
        .into_iter()
        .map(|l| Box::new(l) as Box<dyn TargetLevel>)
        .collect())
}

/// Builds the hierarchy. In measured mode the weights are calibrated at
/// `calibration_point` (typically the initial ensemble mean).
pub fn build_problem(spec: &ProblemSpec, cost_mode: CostMode, calibration_point: Option<&[f64]>) -> Result<Problem> {
    spec.validate()?;
    let analytic = analytic_weights(spec);
    let data = match spec {
        ProblemSpec::DiffusionReaction(s) => Some(diffusion_reaction_data(s)?),
        ProblemSpec::Beam(s) => Some(beam_data(s)?),
        ProblemSpec::GaussianHierarchy(_) => None,
    };
    let mut levels = build_levels(spec, data.as_ref(), &analytic)?;
    let mut weights = analytic;
    if cost_mode == CostMode::Measured {
        let point = calibration_point
            .map(|p| p.to_vec())
            .unwrap_or_else(|| default_calibration_point(spec));
        weights = levels
            .iter()
            .map(|l| measure_score_cost(l.as_ref(), &point, 7))
            .collect::<Result<Vec<_>>>()?;
        // Fresh levels, so calibration solves stay out of the run counters.
        levels = build_levels(spec, data.as_ref(), &weights)?;
    }
    Ok(Problem {
        spec: spec.clone(),
        levels,
        data,
        cost_mode,
        cost_weights: weights,
    })
}

fn build_levels(spec: &ProblemSpec, data: Option<&SyntheticData>, weights: &[f64]) -> Result<Vec<Box<dyn TargetLevel>>> {
    match spec {
        ProblemSpec::DiffusionReaction(s) => {
            let models = (1..=s.levels)
                .map(|l| Ok(Box::new(DiffusionReactionModel::new(l as u32, s.newton)?) as Box<dyn ForwardModel>))
                .collect::<Result<Vec<_>>>()?;
            posterior_levels(&s.prior, data.expect("data"), models, s.fd_step, weights)
        }
        ProblemSpec::Beam(s) => {
            let prior = Prior::log_normal(s.prior_mu, s.prior_sigma, s.dim)?;
            let models = (1..=s.levels)
                .map(|l| Ok(Box::new(BeamModel::new(l as u32, s.dim)?) as Box<dyn ForwardModel>))
                .collect::<Result<Vec<_>>>()?;
            posterior_levels(&prior, data.expect("data"), models, s.fd_step, weights)
        }
        ProblemSpec::GaussianHierarchy(s) => (1..=s.levels)
            .map(|l| {
                let dist = GaussianDist::diagonal(s.level_mean(l), vec![1.0; s.dim])?;
                Ok(Box::new(GaussianTarget::new(dist, l, weights[l - 1])) as Box<dyn TargetLevel>)
            })
            .collect(),
    }
}

fn default_calibration_point(spec: &ProblemSpec) -> Vec<f64> {
    match spec {
        ProblemSpec::DiffusionReaction(_) => vec![1.0, 1.0],
        ProblemSpec::Beam(s) => vec![s.prior_mu.exp(); s.dim],
        ProblemSpec::GaussianHierarchy(s) => vec![0.0; s.dim],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specs_fill_defaults() {
        let dr = DiffusionReactionSpec::default();
        assert_eq!(dr.levels, 3);
        assert_eq!(dr.theta_true, vec![-PI / 4.0, 3.0]);
        let beam = BeamSpec::default();
        assert_eq!((beam.levels, beam.dim, beam.data_nodes), (6, 9, 1001));
        let json = r#"{"kind":"beam","dim":3}"#;
        let p: ProblemSpec = serde_json::from_str(json).unwrap();
        assert_eq!(p.levels(), 6);
        assert!(serde_json::from_str::<ProblemSpec>(r#"{"kind":"beam","bogus":1}"#).is_err());
    }

    #[test]
    fn gaussian_hierarchy_plants_kl() {
        let s = GaussianHierarchySpec::default();
        for l in 1..=4 {
            let d = GaussianDist::diagonal(s.level_mean(l), vec![1.0]).unwrap();
            let kl = crate::divergence::kl_gaussian(&d, &s.limit()).unwrap();
            assert!((kl - 2f64.powi(-2 * l as i32)).abs() < 1e-15);
        }
    }

    #[test]
    fn diffusion_reaction_data_scale() {
        let spec = DiffusionReactionSpec {
            levels: 1,
            ..Default::default()
        };
        let d = diffusion_reaction_data(&spec).unwrap();
        let max = d.noiseless.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        assert!((d.noise_std - 0.05 * max).abs() < 1e-15);
        assert_eq!(d.likelihood.len(), 12);
        assert_eq!(d, diffusion_reaction_data(&spec).unwrap());
    }

    #[test]
    fn beam_truth_is_a_seeded_prior_draw() {
        let spec = BeamSpec::default();
        let a = beam_truth(&spec).unwrap();
        assert_eq!(a, beam_truth(&spec).unwrap());
        assert_eq!(a.len(), 9);
        assert!(a.iter().all(|v| (v.ln() - 1.0).abs() < 0.3));
        let other = beam_truth(&BeamSpec { truth_seed: 1, ..Default::default() }).unwrap();
        assert_ne!(a, other);
        let d = beam_data(&spec).unwrap();
        assert_eq!(d.likelihood.len(), 41);
        assert_eq!(d.noiseless[0], 0.0);
    }

    #[test]
    fn build_gaussian_problem_analytic_and_measured() {
        let spec = ProblemSpec::GaussianHierarchy(GaussianHierarchySpec::default());
        let p = build_problem(&spec, CostMode::Analytic, None).unwrap();
        assert_eq!(p.cost_weights, vec![4.0, 16.0, 64.0]);
        assert_eq!(p.levels[2].cost_weight(), 64.0);
        let p = build_problem(&spec, CostMode::Measured, None).unwrap();
        assert!(p.cost_weights.iter().all(|c| *c > 0.0));
        assert_eq!(p.levels[0].counters().snapshot().score, 0);
    }

    #[test]
    fn cost_mode_parses() {
        assert_eq!("measured".parse::<CostMode>().unwrap(), CostMode::Measured);
        assert!("fast".parse::<CostMode>().is_err());
    }
}
