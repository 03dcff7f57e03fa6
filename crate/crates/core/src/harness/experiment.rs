//! Replicated MLSVGD-vs-SVGD experiments and their artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Provenance};
use super::reference::{load_or_compute_reference, Reference};
use super::summary::{summarize, Summary};
use super::write_atomic;
use crate::ensemble::init_ensemble;
use crate::error::Result;
use crate::kernel::RbfKernel;
use crate::mcmc::mean_error_metric;
use crate::mlsvgd::{run_mlsvgd_with, LevelSchedule, MlOptions, RunSummary};
use crate::par;
use crate::problems::{build_problem, Problem};
use crate::rng::GENERATOR;
use crate::target::TargetLevel;

/// Points on the shared log-spaced cost grid of the error curves.
const COST_GRID: usize = 400;

#[derive(Debug, Clone, PartialEq)]
struct Job {
    seed: u64,
    /// Index into `config.tolerances`; the baseline runs at the smallest.
    tolerance: usize,
    schedule: LevelSchedule,
    baseline: bool,
}

/// Cost and wall time at which a run first met a tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub tolerance: f64,
    pub iteration: u64,
    pub cost: f64,
    pub wall_seconds: f64,
}

/// Contents of `runs/<stem>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFile {
    pub provenance: Provenance,
    pub tolerance: f64,
    pub baseline: bool,
    pub initial_mean: Vec<f64>,
    pub summary: RunSummary,
    /// For the baseline: where each configured tolerance was first met.
    pub crossings: Vec<Option<Crossing>>,
    pub particles: Vec<f64>,
}

impl RunFile {
    pub fn label(&self) -> String {
        schedule_label(&self.summary.schedule, self.baseline)
    }
}

pub(crate) fn schedule_label(s: &LevelSchedule, baseline: bool) -> String {
    if baseline {
        format!("SL{}", s.label())
    } else {
        s.label()
    }
}

struct Outcome {
    job: Job,
    file: RunFile,
    /// `(cumulative cost, particle mean)` after every iteration.
    means: Vec<(f64, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub seed: u64,
    pub tolerance: f64,
    pub schedule: String,
    pub ml_cost: f64,
    pub sl_cost: Option<f64>,
    pub speedup: Option<f64>,
    pub ml_wall: f64,
    pub sl_wall: Option<f64>,
    pub wall_speedup: Option<f64>,
    pub ml_flagged: bool,
    pub sl_flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedRow {
    pub tolerance: f64,
    pub schedule: String,
    pub target_error: f64,
    pub ml_cost: Option<f64>,
    pub sl_cost: Option<f64>,
    pub speedup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCurve {
    pub tolerance: f64,
    pub schedule: String,
    pub costs: Vec<f64>,
    pub errors: Vec<f64>,
}

pub struct ExperimentOutcome {
    pub config_hash: String,
    pub output_dir: PathBuf,
    pub speedups: Vec<SpeedupRow>,
    pub matched: Vec<MatchedRow>,
    pub curves: Vec<ErrorCurve>,
    pub reference: Option<Reference>,
    pub flagged: Vec<String>,
    pub summary: Summary,
}

pub struct RunOptions {
    pub jobs: Option<usize>,
    /// Skip the MCMC reference and the error-vs-cost outputs.
    pub skip_reference: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            jobs: None,
            skip_reference: false,
        }
    }
}

fn jobs_for(cfg: &ExperimentConfig) -> Result<Vec<Job>> {
    let tightest = (0..cfg.tolerances.len())
        .min_by(|a, b| cfg.tolerances[*a].total_cmp(&cfg.tolerances[*b]))
        .unwrap_or(0);
    let mut jobs = Vec::new();
    for &seed in &cfg.seeds {
        jobs.push(Job {
            seed,
            tolerance: tightest,
            schedule: LevelSchedule::single(cfg.baseline_level())?,
            baseline: true,
        });
        for t in 0..cfg.tolerances.len() {
            for s in &cfg.schedules {
                jobs.push(Job {
                    seed,
                    tolerance: t,
                    schedule: s.clone(),
                    baseline: false,
                });
            }
        }
    }
    Ok(jobs)
}

fn stem(job: &Job) -> String {
    let levels: Vec<String> = job.schedule.levels().iter().map(|l| l.to_string()).collect();
    let kind = if job.baseline { "sl" } else { "ml" };
    format!("tol{}_{kind}{}_seed{}", job.tolerance, levels.join("-"), job.seed)
}

fn provenance(cfg: &ExperimentConfig, problem: &Problem, seed: Option<u64>) -> Provenance {
    Provenance {
        config_hash: cfg.hash(),
        seed,
        cost_mode: cfg.cost_mode,
        generator: GENERATOR.to_string(),
        noise_convention: problem.data.as_ref().map(|d| d.noise_convention.clone()),
        cost_weights: problem.cost_weights.clone(),
    }
}

fn run_job(cfg: &ExperimentConfig, problem: &Problem, job: &Job) -> Result<Outcome> {
    let levels = problem.fresh_levels()?;
    let hierarchy: Vec<&dyn TargetLevel> = levels.iter().map(|l| l.as_ref()).collect();
    let kernel = RbfKernel::new(cfg.bandwidth)?;
    let init = init_ensemble(cfg.particles, &cfg.init_mean, &cfg.init_var, job.seed)?;
    let initial_mean = init.mean();
    let tolerance = cfg.tolerances[job.tolerance];
    let mut means = Vec::new();
    let mut observe = |r: &crate::svgd::IterationRecord, e: &crate::ensemble::ParticleEnsemble| {
        means.push((r.cum_cost, e.mean()));
    };
    let report = run_mlsvgd_with(
        init,
        &hierarchy,
        &job.schedule,
        &kernel,
        &cfg.svgd(tolerance),
        MlOptions {
            tolerances: None,
            observer: Some(&mut observe),
        },
    )?;
    let crossings = if job.baseline {
        cfg.tolerances
            .iter()
            .map(|&tol| {
                report.trace.records.iter().find(|r| r.grad_norm <= tol).map(|r| Crossing {
                    tolerance: tol,
                    iteration: r.iteration,
                    cost: r.cum_cost,
                    wall_seconds: r.wall_seconds,
                })
            })
            .collect()
    } else {
        Vec::new()
    };
    let prov = provenance(cfg, problem, Some(job.seed));
    let file = RunFile {
        provenance: prov.clone(),
        tolerance,
        baseline: job.baseline,
        initial_mean,
        summary: report.summary(Some(job.seed)),
        crossings,
        particles: report.ensemble.as_flat().to_vec(),
    };
    let dir = cfg.output_dir.join("runs");
    let name = stem(job);
    write_atomic(&dir.join(format!("{name}.json")), serde_json::to_string_pretty(&file)?.as_bytes())?;
    write_trace(&dir.join(format!("{name}_trace.csv")), &prov, &file, &report.trace.records, &means)?;
    log::info!(
        "{name}: cost {:.4e}, {} iterations, {:.1} s{}",
        report.cost(),
        report.ledger.iterations(),
        report.wall_seconds,
        if report.flagged() { " (flagged)" } else { "" }
    );
    Ok(Outcome {
        job: job.clone(),
        file,
        means,
    })
}

fn write_trace(
    path: &Path,
    prov: &Provenance,
    file: &RunFile,
    records: &[crate::svgd::IterationRecord],
    means: &[(f64, Vec<f64>)],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let d = file.initial_mean.len();
    let mut header: Vec<String> = [
        "config_hash", "seed", "cost_mode", "schedule", "tolerance", "iteration", "level", "grad_norm",
        "cum_cost", "wall_seconds",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((1..=d).map(|k| format!("mean_{k}")));
    w.write_record(&header)?;
    let label = file.label();
    let mode = cost_mode_str(prov);
    let seed = prov.seed.map(|s| s.to_string()).unwrap_or_default();
    for (r, (_, m)) in records.iter().zip(means) {
        let mut row = vec![
            prov.config_hash.clone(),
            seed.clone(),
            mode.to_string(),
            label.clone(),
            format!("{:e}", file.tolerance),
            r.iteration.to_string(),
            r.level.to_string(),
            format!("{:e}", r.grad_norm),
            format!("{:e}", r.cum_cost),
            format!("{:.6}", r.wall_seconds),
        ];
        row.extend(m.iter().map(|v| format!("{v:e}")));
        w.write_record(&row)?;
    }
    write_atomic(path, &w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?)
}

fn cost_mode_str(p: &Provenance) -> &'static str {
    match p.cost_mode {
        crate::problems::CostMode::Measured => "measured",
        crate::problems::CostMode::Analytic => "analytic",
    }
}

/// Particle mean of a run once it has spent `cost`.
fn mean_at(initial: &[f64], means: &[(f64, Vec<f64>)], cost: f64) -> Vec<f64> {
    let k = means.partition_point(|(c, _)| *c <= cost);
    if k == 0 {
        initial.to_vec()
    } else {
        means[k - 1].1.clone()
    }
}

pub(crate) fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n < 2 || !(hi > lo) {
        return vec![hi];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp()).collect()
}

/// Smallest grid cost after which the curve stays at or below `target`.
pub(crate) fn matched_cost(costs: &[f64], errors: &[f64], target: f64) -> Option<f64> {
    let mut first = None;
    for (c, e) in costs.iter().zip(errors).rev() {
        if *e <= target {
            first = Some(*c);
        } else {
            break;
        }
    }
    first
}

fn error_curves(
    cfg: &ExperimentConfig,
    outcomes: &[Outcome],
    reference: &[f64],
) -> Result<Vec<ErrorCurve>> {
    let mut curves = Vec::new();
    for (t, &tol) in cfg.tolerances.iter().enumerate() {
        let mut groups: Vec<(String, Vec<&Outcome>)> = Vec::new();
        let baseline: Vec<&Outcome> = outcomes.iter().filter(|o| o.job.baseline).collect();
        if let Some(b) = baseline.first() {
            groups.push((b.file.label(), baseline.clone()));
        }
        for s in &cfg.schedules {
            let runs: Vec<&Outcome> = outcomes
                .iter()
                .filter(|o| !o.job.baseline && o.job.tolerance == t && &o.job.schedule == s)
                .collect();
            groups.push((s.label(), runs));
        }
        let all: Vec<&Outcome> = groups.iter().flat_map(|(_, g)| g.iter().copied()).collect();
        let lo = all
            .iter()
            .filter_map(|o| o.means.first().map(|m| m.0))
            .fold(f64::INFINITY, f64::min);
        let hi = all
            .iter()
            .filter_map(|o| o.means.last().map(|m| m.0))
            .fold(0.0, f64::max);
        let grid = log_grid(lo, hi, COST_GRID);
        for (label, runs) in groups {
            let mut errors = Vec::with_capacity(grid.len());
            for &c in &grid {
                let ms: Vec<Vec<f64>> = runs
                    .iter()
                    .map(|o| mean_at(&o.file.initial_mean, &o.means, c))
                    .collect();
                errors.push(mean_error_metric(reference, &ms, cfg.seeds.len())?);
            }
            curves.push(ErrorCurve {
                tolerance: tol,
                schedule: label,
                costs: grid.clone(),
                errors,
            });
        }
    }
    Ok(curves)
}

fn speedup_rows(cfg: &ExperimentConfig, outcomes: &[Outcome]) -> Vec<SpeedupRow> {
    let mut rows = Vec::new();
    for o in outcomes.iter().filter(|o| !o.job.baseline) {
        let base = outcomes.iter().find(|b| b.job.baseline && b.job.seed == o.job.seed);
        let crossing = base.and_then(|b| b.file.crossings[o.job.tolerance]);
        let sl_cost = crossing.map(|c| c.cost);
        let sl_wall = crossing.map(|c| c.wall_seconds);
        let ml_cost = o.file.summary.cost;
        let ml_wall = o.file.summary.wall_seconds;
        rows.push(SpeedupRow {
            seed: o.job.seed,
            tolerance: cfg.tolerances[o.job.tolerance],
            schedule: o.job.schedule.label(),
            ml_cost,
            sl_cost,
            speedup: sl_cost.map(|s| s / ml_cost),
            ml_wall,
            sl_wall,
            wall_speedup: sl_wall.map(|s| s / ml_wall),
            ml_flagged: o.file.summary.flagged,
            sl_flagged: crossing.is_none(),
        });
    }
    rows
}

fn matched_rows(cfg: &ExperimentConfig, curves: &[ErrorCurve]) -> Vec<MatchedRow> {
    let mut rows = Vec::new();
    let sl_label = schedule_label(&LevelSchedule::single(cfg.baseline_level()).expect("valid level"), true);
    for &target in &cfg.error_targets {
        for &tol in &cfg.tolerances {
            let curve = |label: &str| {
                curves
                    .iter()
                    .find(|c| c.tolerance == tol && c.schedule == label)
                    .and_then(|c| matched_cost(&c.costs, &c.errors, target))
            };
            let sl_cost = curve(&sl_label);
            for s in &cfg.schedules {
                let ml_cost = curve(&s.label());
                rows.push(MatchedRow {
                    tolerance: tol,
                    schedule: s.label(),
                    target_error: target,
                    ml_cost,
                    sl_cost,
                    speedup: match (sl_cost, ml_cost) {
                        (Some(a), Some(b)) => Some(a / b),
                        _ => None,
                    },
                });
            }
        }
    }
    rows
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

fn write_tables(
    cfg: &ExperimentConfig,
    mode: &str,
    speedups: &[SpeedupRow],
    curves: &[ErrorCurve],
    matched: &[MatchedRow],
) -> Result<()> {
    let hash = cfg.hash();
    let seeds: Vec<String> = cfg.seeds.iter().map(|s| s.to_string()).collect();
    let seeds = seeds.join(";");

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "config_hash", "cost_mode", "seed", "tolerance", "schedule", "ml_cost", "sl_cost", "speedup", "ml_wall",
        "sl_wall", "wall_speedup", "ml_flagged", "sl_flagged",
    ])?;
    for r in speedups {
        w.write_record([
            hash.clone(),
            mode.into(),
            r.seed.to_string(),
            format!("{:e}", r.tolerance),
            r.schedule.clone(),
            format!("{:e}", r.ml_cost),
            opt(r.sl_cost),
            opt(r.speedup),
            format!("{:.6}", r.ml_wall),
            opt(r.sl_wall),
            opt(r.wall_speedup),
            r.ml_flagged.to_string(),
            r.sl_flagged.to_string(),
        ])?;
    }
    write_atomic(&cfg.output_dir.join("speedup.csv"), &into_bytes(w)?)?;

    if !curves.is_empty() {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["config_hash", "cost_mode", "seed", "tolerance", "schedule", "cost", "error"])?;
        for c in curves {
            for (x, e) in c.costs.iter().zip(&c.errors) {
                w.write_record([
                    hash.clone(),
                    mode.into(),
                    seeds.clone(),
                    format!("{:e}", c.tolerance),
                    c.schedule.clone(),
                    format!("{x:e}"),
                    format!("{e:e}"),
                ])?;
            }
        }
        write_atomic(&cfg.output_dir.join("error_vs_cost.csv"), &into_bytes(w)?)?;

        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "config_hash", "cost_mode", "seed", "tolerance", "schedule", "target_error", "ml_cost", "sl_cost",
            "speedup",
        ])?;
        for r in matched {
            w.write_record([
                hash.clone(),
                mode.into(),
                seeds.clone(),
                format!("{:e}", r.tolerance),
                r.schedule.clone(),
                format!("{:e}", r.target_error),
                opt(r.ml_cost),
                opt(r.sl_cost),
                opt(r.speedup),
            ])?;
        }
        write_atomic(&cfg.output_dir.join("matched_error.csv"), &into_bytes(w)?)?;
    }
    Ok(())
}

fn into_bytes(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner()
        .map_err(|e| std::io::Error::other(e.to_string()).into())
}

/// Runs every schedule and the single-level baseline for every seed, then
/// writes the tables and the summary into `config.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, options: &RunOptions) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(cfg.output_dir.join("runs"))?;
    let problem = build_problem(&cfg.problem, cfg.cost_mode, Some(&cfg.init_mean))?;
    let prov = provenance(cfg, &problem, None);
    let stamped = serde_json::json!({ "provenance": prov, "config": cfg });
    write_atomic(&cfg.output_dir.join("config.json"), serde_json::to_string_pretty(&stamped)?.as_bytes())?;

    let reference = if options.skip_reference {
        None
    } else {
        Some(load_or_compute_reference(cfg, &problem)?)
    };

    let jobs = jobs_for(cfg)?;
    let outcomes = par::with_workers(options.jobs, || {
        par::try_map_indexed(jobs.len(), |k| run_job(cfg, &problem, &jobs[k]))
    })?;

    let speedups = speedup_rows(cfg, &outcomes);
    let curves = match &reference {
        Some(r) => error_curves(cfg, &outcomes, &r.chain.mean)?,
        None => Vec::new(),
    };
    let matched = matched_rows(cfg, &curves);
    write_tables(cfg, cost_mode_str(&prov), &speedups, &curves, &matched)?;
    let flagged: Vec<String> = outcomes
        .iter()
        .filter(|o| o.file.summary.flagged)
        .map(|o| stem(&o.job))
        .collect();
    let summary = summarize(&cfg.output_dir)?;
    Ok(ExperimentOutcome {
        config_hash: cfg.hash(),
        output_dir: cfg.output_dir.clone(),
        speedups,
        matched,
        curves,
        reference,
        flagged,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_endpoints() {
        let g = log_grid(1.0, 100.0, 3);
        assert!((g[0] - 1.0).abs() < 1e-12 && (g[1] - 10.0).abs() < 1e-12 && (g[2] - 100.0).abs() < 1e-12);
    }

    #[test]
    fn matched_cost_needs_to_stay_below() {
        let c = [1.0, 2.0, 3.0, 4.0, 5.0];
        let e = [0.5, 0.05, 0.5, 0.05, 0.01];
        assert_eq!(matched_cost(&c, &e, 0.1), Some(4.0));
        assert_eq!(matched_cost(&c, &e, 0.001), None);
        assert_eq!(matched_cost(&c, &e, 1.0), Some(1.0));
    }

    #[test]
    fn mean_at_steps() {
        let m = vec![(1.0, vec![1.0]), (2.0, vec![2.0])];
        assert_eq!(mean_at(&[0.0], &m, 0.5), vec![0.0]);
        assert_eq!(mean_at(&[0.0], &m, 1.0), vec![1.0]);
        assert_eq!(mean_at(&[0.0], &m, 7.0), vec![2.0]);
    }
}
