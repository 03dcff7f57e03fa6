//! Discrete SVGD: the synchronous particle update, the gradient-norm
//! stopping statistic, and the fixed-target run loop.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ensemble::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::kernel::RbfKernel;
use crate::par;
use crate::target::TargetLevel;

pub const DEFAULT_MAX_ITERATIONS: u64 = 50_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvgdConfig {
    pub step_size: f64,
    pub tolerance: f64,
    pub max_iterations: u64,
}

impl Default for SvgdConfig {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            tolerance: 1e-4,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }
}

impl SvgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !(self.tolerance > 0.0) {
            return Err(Error::Argument("step size and tolerance must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Argument("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub level: usize,
    pub grad_norm: f64,
    pub cum_cost: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
}

impl IterationTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    /// CSV with columns `iteration,level,grad_norm,cum_cost,wall_seconds`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
        let records = r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { records })
    }
}

fn check_scores(ensemble: &ParticleEnsemble, scores: &[f64]) -> Result<()> {
    let (n, d) = (ensemble.count(), ensemble.dim());
    if scores.len() != n * d {
        return Err(Error::DimensionMismatch {
            expected: n * d,
            got: scores.len(),
        });
    }
    if let Some(k) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFiniteScore { index: k / d });
    }
    Ok(())
}

/// Per-particle update directions
/// `φ_i = (1/N) Σ_j [∇₁K(θ_j, θ_i) + K(θ_j, θ_i) s_j]`, row-major `N × d`.
pub fn update_directions(
    ensemble: &ParticleEnsemble,
    kernel: &RbfKernel,
    scores: &[f64],
) -> Result<Vec<f64>> {
    check_scores(ensemble, scores)?;
    let (n, d) = (ensemble.count(), ensemble.dim());
    let theta = ensemble.as_flat();
    let inv_bw = 1.0 / kernel.bandwidth();
    let inv_n = 1.0 / n as f64;
    let mut phi = vec![0.0; n * d];
    par::for_each_row(&mut phi, d, |i, acc| {
        let ti = &theta[i * d..(i + 1) * d];
        for j in 0..n {
            let tj = &theta[j * d..(j + 1) * d];
            let sq: f64 = ti.iter().zip(tj).map(|(a, b)| (a - b) * (a - b)).sum();
            let k = kernel.from_sq_dist(sq);
            let sj = &scores[j * d..(j + 1) * d];
            for c in 0..d {
                acc[c] += k * sj[c] + k * (ti[c] - tj[c]) * inv_bw;
            }
        }
        acc.iter_mut().for_each(|v| *v *= inv_n);
    });
    Ok(phi)
}

fn mean_row_norm(phi: &[f64], d: usize) -> f64 {
    let n = phi.len() / d;
    phi.chunks_exact(d)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / n as f64
}

/// One synchronous SVGD step: every particle moves by `δ φ_i` computed from
/// the same input snapshot.
pub fn svgd_step(
    ensemble: &ParticleEnsemble,
    kernel: &RbfKernel,
    scores: &[f64],
    step_size: f64,
) -> Result<ParticleEnsemble> {
    Ok(svgd_update(ensemble, kernel, scores, step_size)?.0)
}

/// `ĝ = (1/N) Σ_i ‖φ_i‖`, the mean norm of the update directions.
pub fn gradient_norm_estimate(
    ensemble: &ParticleEnsemble,
    kernel: &RbfKernel,
    scores: &[f64],
) -> Result<f64> {
    let phi = update_directions(ensemble, kernel, scores)?;
    Ok(mean_row_norm(&phi, ensemble.dim()))
}

/// Step and gradient-norm estimate from a single pass over the kernel sums.
pub fn svgd_update(
    ensemble: &ParticleEnsemble,
    kernel: &RbfKernel,
    scores: &[f64],
    step_size: f64,
) -> Result<(ParticleEnsemble, f64)> {
    let phi = update_directions(ensemble, kernel, scores)?;
    let g = mean_row_norm(&phi, ensemble.dim());
    let moved: Vec<f64> = ensemble
        .as_flat()
        .iter()
        .zip(&phi)
        .map(|(t, p)| t + step_size * p)
        .collect();
    let mut next = ensemble.with_positions(moved);
    next.iteration += 1;
    Ok((next, g))
}

/// Scores of all particles, row-major. A failing particle is reported by
/// the lowest failing index.
pub fn evaluate_scores(ensemble: &ParticleEnsemble, target: &dyn TargetLevel) -> Result<Vec<f64>> {
    let d = ensemble.dim();
    if target.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: target.dim(),
            got: d,
        });
    }
    let rows = par::try_map_indexed(ensemble.count(), |i| target.score_slot(i, ensemble.particle(i)))?;
    let mut flat = Vec::with_capacity(ensemble.count() * d);
    for (i, r) in rows.into_iter().enumerate() {
        if r.len() != d || r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteScore { index: i });
        }
        flat.extend(r);
    }
    Ok(flat)
}

/// Result of iterating on one fixed target.
#[derive(Debug, Clone)]
pub struct LevelRun {
    pub ensemble: ParticleEnsemble,
    pub trace: IterationTrace,
    pub iterations: u64,
    pub tolerance_reached: bool,
}

/// Callback invoked after every iteration with the new ensemble.
pub type Observer<'a> = &'a mut dyn FnMut(&IterationRecord, &ParticleEnsemble);

pub(crate) struct RunClock {
    pub start: Instant,
    pub cum_cost: f64,
    pub iteration: u64,
}

impl RunClock {
    pub fn new() -> Self {
        Self {
            start: Instant::now(),
            cum_cost: 0.0,
            iteration: 0,
        }
    }
}

/// Repeat-until loop: update, then test `ĝ ≤ tolerance`. At least one step
/// is always taken.
pub(crate) fn run_level(
    ensemble: ParticleEnsemble,
    target: &dyn TargetLevel,
    kernel: &RbfKernel,
    config: &SvgdConfig,
    tolerance: f64,
    clock: &mut RunClock,
    mut observer: Option<Observer<'_>>,
) -> Result<LevelRun> {
    config.validate()?;
    target.begin_run();
    let mut ens = ensemble;
    ens.level_index = target.level();
    let per_iteration_cost = target.cost_weight() * ens.count() as f64;
    let mut trace = IterationTrace::default();
    let mut iterations = 0;
    loop {
        let scores = evaluate_scores(&ens, target)?;
        let (next, g) = svgd_update(&ens, kernel, &scores, config.step_size)?;
        ens = next;
        iterations += 1;
        clock.iteration += 1;
        clock.cum_cost += per_iteration_cost;
        let record = IterationRecord {
            iteration: clock.iteration,
            level: target.level(),
            grad_norm: g,
            cum_cost: clock.cum_cost,
            wall_seconds: clock.start.elapsed().as_secs_f64(),
        };
        trace.records.push(record);
        if let Some(obs) = observer.as_mut() {
            obs(&record, &ens);
        }
        if g <= tolerance {
            return Ok(LevelRun {
                ensemble: ens,
                trace,
                iterations,
                tolerance_reached: true,
            });
        }
        if iterations >= config.max_iterations {
            log::warn!(
                "{}: tolerance {tolerance:e} not reached after {iterations} iterations (ĝ = {g:e})",
                target.label()
            );
            return Ok(LevelRun {
                ensemble: ens,
                trace,
                iterations,
                tolerance_reached: false,
            });
        }
    }
}

/// SVGD on a single fixed target until `ĝ ≤ ε` or the iteration cap.
pub fn run_single_level(
    ensemble: ParticleEnsemble,
    target: &dyn TargetLevel,
    kernel: &RbfKernel,
    config: &SvgdConfig,
) -> Result<LevelRun> {
    run_level(
        ensemble,
        target,
        kernel,
        config,
        config.tolerance,
        &mut RunClock::new(),
        None,
    )
}
