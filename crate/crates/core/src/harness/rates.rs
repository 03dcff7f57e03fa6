//! Empirical rate study: cost growth, KL decay across levels and the SVGD
//! decay rate of a moment-matched surrogate.

use serde::{Deserialize, Serialize};

use super::config::{Provenance, RatesConfig};
use super::write_atomic;
use crate::divergence::{fit_rates, kl_gaussian, kl_unnormalized_from_samples, GaussianDist, McEstimate, RateFitReport, RateInputs};
use crate::ensemble::init_ensemble;
use crate::error::{Error, Result};
use crate::kernel::RbfKernel;
use crate::mcmc::{dram_sample, DramConfig};
use crate::problems::{build_problem, GaussianHierarchySpec, Problem, ProblemSpec};
use crate::rng::GENERATOR;
use crate::svgd::{evaluate_scores, svgd_update};
use crate::target::GaussianTarget;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelKl {
    pub level: usize,
    pub cost: f64,
    pub kl: f64,
    /// Zero for closed-form values.
    pub std_error: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatesReport {
    pub provenance: Provenance,
    /// Level used as the stand-in for the limit density, if any.
    pub proxy_level: Option<usize>,
    pub levels: Vec<LevelKl>,
    pub decay: Vec<(f64, f64)>,
    pub fit: RateFitReport,
}

/// KL of a moment-matched Gaussian to `target` after every SVGD iteration.
pub fn svgd_decay(
    target: &GaussianDist,
    particles: usize,
    iterations: u64,
    step: f64,
    bandwidth: f64,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let d = target.dim();
    if particles <= d {
        return Err(Error::Config("decay_particles must exceed the dimension".into()));
    }
    let t = GaussianTarget::new(target.clone(), 1, 1.0);
    let kernel = RbfKernel::new(bandwidth)?;
    let start: Vec<f64> = target.mean().iter().map(|m| m + 2.0).collect();
    let mut ens = init_ensemble(particles, &start, &vec![0.25; d], seed)?;
    let mut out = Vec::with_capacity(iterations as usize);
    for k in 1..=iterations {
        let scores = evaluate_scores(&ens, &t)?;
        ens = svgd_update(&ens, &kernel, &scores, step)?.0;
        let kl = kl_gaussian(&GaussianDist::from_ensemble(&ens)?, target)?;
        out.push((k as f64, kl));
    }
    Ok(out)
}

fn gaussian_levels(spec: &GaussianHierarchySpec, problem: &Problem) -> Result<Vec<LevelKl>> {
    let limit = spec.limit();
    (1..=spec.levels)
        .map(|l| {
            let dist = GaussianDist::diagonal(spec.level_mean(l), vec![1.0; spec.dim])?;
            Ok(LevelKl {
                level: l,
                cost: problem.cost_weights[l - 1],
                kl: kl_gaussian(&dist, &limit)?,
                std_error: 0.0,
                samples: 0,
            })
        })
        .collect()
}

/// `KL(π^(ℓ) ‖ π^(L))` from chain samples of level `ℓ`, for `ℓ < L`.
fn posterior_levels(cfg: &RatesConfig, problem: &Problem) -> Result<Vec<LevelKl>> {
    let levels = problem.fresh_levels()?;
    let proxy = levels.last().expect("levels").as_ref();
    let start = cfg.chain_start.clone().unwrap_or_else(|| default_start(&cfg.problem));
    let chain_cfg = DramConfig {
        samples: cfg.samples * cfg.dram.stride,
        ..cfg.dram.clone()
    };
    let mut out = Vec::new();
    for (k, level) in levels[..levels.len() - 1].iter().enumerate() {
        let chain = dram_sample(level.as_ref(), &start, &DramConfig { seed: chain_cfg.seed + k as u64, ..chain_cfg.clone() })?;
        let mut lp = Vec::with_capacity(chain.len());
        let mut lq = Vec::with_capacity(chain.len());
        proxy.begin_run();
        for i in 0..chain.len() {
            let x = chain.sample(i);
            lp.push(level.log_density_slot(0, x)?);
            lq.push(proxy.log_density_slot(0, x)?);
        }
        let McEstimate { estimate, std_error, samples } = kl_unnormalized_from_samples(&lp, &lq)?;
        log::info!("level {}: KL to proxy {estimate:.4e} ± {std_error:.1e}", level.level());
        out.push(LevelKl {
            level: level.level(),
            cost: problem.cost_weights[k],
            kl: estimate,
            std_error,
            samples,
        });
    }
    Ok(out)
}

fn default_start(p: &ProblemSpec) -> Vec<f64> {
    match p {
        ProblemSpec::DiffusionReaction(_) => vec![1.0, 1.0],
        ProblemSpec::Beam(s) => vec![s.prior_mu.exp(); s.dim],
        ProblemSpec::GaussianHierarchy(s) => vec![0.0; s.dim],
    }
}

pub fn run_rates(cfg: &RatesConfig) -> Result<RatesReport> {
    cfg.validate()?;
    let problem = build_problem(&cfg.problem, cfg.cost_mode, None)?;
    let (levels, proxy_level, base, limit) = match &cfg.problem {
        ProblemSpec::GaussianHierarchy(s) => (gaussian_levels(s, &problem)?, None, s.base, s.limit()),
        other => {
            let levels = posterior_levels(cfg, &problem)?;
            // Mesh width halves per level.
            let limit = GaussianDist::diagonal(vec![0.0; problem.dim()], vec![1.0; problem.dim()])?;
            (levels, Some(other.levels()), 2.0, limit)
        }
    };
    let decay = svgd_decay(
        &limit,
        cfg.decay_particles,
        cfg.decay_iterations,
        cfg.decay_step_size,
        cfg.decay_bandwidth,
        cfg.seed,
    )?;
    let positive: Vec<&LevelKl> = levels.iter().filter(|l| l.kl > 0.0).collect();
    if positive.len() < levels.len() {
        log::warn!("dropping {} nonpositive KL estimates", levels.len() - positive.len());
    }
    let fit = fit_rates(&RateInputs {
        levels: positive.iter().map(|l| l.level).collect(),
        costs: positive.iter().map(|l| l.cost).collect(),
        kl: positive.iter().map(|l| l.kl).collect(),
        base,
        decay: decay.iter().copied().filter(|(_, k)| *k > 0.0).collect(),
    })?;
    let report = RatesReport {
        provenance: Provenance {
            config_hash: cfg.hash(),
            seed: Some(cfg.seed),
            cost_mode: cfg.cost_mode,
            generator: GENERATOR.to_string(),
            noise_convention: problem.data.as_ref().map(|d| d.noise_convention.clone()),
            cost_weights: problem.cost_weights.clone(),
        },
        proxy_level,
        levels,
        decay,
        fit,
    };
    write_rates(cfg, &report)?;
    Ok(report)
}

fn write_rates(cfg: &RatesConfig, report: &RatesReport) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    write_atomic(&cfg.output_dir.join("rates.json"), serde_json::to_string_pretty(report)?.as_bytes())?;
    let mode = serde_json::to_value(cfg.cost_mode)?;
    let mode = mode.as_str().unwrap_or_default().to_string();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["config_hash", "seed", "cost_mode", "level", "cost", "kl", "kl_std_error", "samples"])?;
    for l in &report.levels {
        w.write_record([
            report.provenance.config_hash.clone(),
            cfg.seed.to_string(),
            mode.clone(),
            l.level.to_string(),
            format!("{:e}", l.cost),
            format!("{:e}", l.kl),
            format!("{:e}", l.std_error),
            l.samples.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    write_atomic(&cfg.output_dir.join("rates_levels.csv"), &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_is_monotone_early_on_a_gaussian() {
        let target = GaussianDist::diagonal(vec![0.0], vec![1.0]).unwrap();
        let d = svgd_decay(&target, 50, 30, 0.1, 1.0, 1).unwrap();
        assert_eq!(d.len(), 30);
        assert!(d[29].1 < d[0].1 * 0.5, "{:?} {:?}", d[0], d[29]);
    }
}
