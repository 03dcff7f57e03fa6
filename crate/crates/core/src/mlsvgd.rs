//! The multilevel loop: SVGD on each scheduled level in turn, each started
//! from the previous level's final ensemble, with cost bookkeeping.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::{EnsembleMeta, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::kernel::RbfKernel;
use crate::svgd::{run_level, IterationRecord, IterationTrace, Observer, RunClock, SvgdConfig};
use crate::target::TargetLevel;

/// Strictly increasing 1-based level indices ending at the finest level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct LevelSchedule(Vec<usize>);

impl TryFrom<Vec<usize>> for LevelSchedule {
    type Error = Error;

    fn try_from(levels: Vec<usize>) -> Result<Self> {
        Self::new(levels)
    }
}

impl From<LevelSchedule> for Vec<usize> {
    fn from(s: LevelSchedule) -> Self {
        s.0
    }
}

impl LevelSchedule {
    pub fn new(levels: Vec<usize>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Argument("empty level schedule".into()));
        }
        if levels[0] == 0 {
            return Err(Error::Argument("levels are 1-based".into()));
        }
        if levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Argument(format!(
                "schedule {levels:?} is not strictly increasing"
            )));
        }
        Ok(Self(levels))
    }

    /// Single-level schedule `{L}`.
    pub fn single(level: usize) -> Result<Self> {
        Self::new(vec![level])
    }

    pub fn levels(&self) -> &[usize] {
        &self.0
    }

    pub fn finest(&self) -> usize {
        *self.0.last().expect("schedule is nonempty")
    }

    pub fn is_single_level(&self) -> bool {
        self.0.len() == 1
    }

    /// Checks that the schedule ends at the top of a hierarchy of `available`
    /// levels.
    pub fn validate_for(&self, available: usize) -> Result<()> {
        if self.finest() != available {
            return Err(Error::Argument(format!(
                "schedule {:?} must end at the finest level {available}",
                self.0
            )));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let parts: Vec<String> = self.0.iter().map(|l| l.to_string()).collect();
        format!("{{{}}}", parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelEntry {
    pub level: usize,
    pub cost_weight: f64,
    pub iterations: u64,
    pub score_evaluations: u64,
    pub density_evaluations: u64,
    pub tolerance: f64,
    pub tolerance_reached: bool,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub particles: usize,
    pub entries: Vec<LevelEntry>,
}

impl CostLedger {
    pub fn cost(&self) -> f64 {
        cost_of_run(self)
    }

    pub fn wall_seconds(&self) -> f64 {
        self.entries.iter().map(|e| e.wall_seconds).sum()
    }

    pub fn iterations(&self) -> u64 {
        self.entries.iter().map(|e| e.iterations).sum()
    }
}

/// `Σ_ℓ c_ℓ n_ℓ N`.
pub fn cost_of_run(ledger: &CostLedger) -> f64 {
    ledger
        .entries
        .iter()
        .map(|e| e.cost_weight * e.iterations as f64 * ledger.particles as f64)
        .sum()
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub schedule: LevelSchedule,
    pub ensemble: ParticleEnsemble,
    pub trace: IterationTrace,
    /// Global iteration index of the first iteration on each level after the first.
    pub switch_iterations: Vec<u64>,
    pub ledger: CostLedger,
    pub wall_seconds: f64,
}

/// JSON-serializable summary of a [`RunReport`]; the trace and ensemble go
/// to their own CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schedule: LevelSchedule,
    pub switch_iterations: Vec<u64>,
    pub ledger: CostLedger,
    pub cost: f64,
    pub wall_seconds: f64,
    pub flagged: bool,
    pub final_mean: Vec<f64>,
    pub ensemble: EnsembleMeta,
}

impl RunReport {
    pub fn cost(&self) -> f64 {
        self.ledger.cost()
    }

    /// True if some level stopped at the iteration cap.
    pub fn flagged(&self) -> bool {
        self.ledger.entries.iter().any(|e| !e.tolerance_reached)
    }

    pub fn summary(&self, seed: Option<u64>) -> RunSummary {
        RunSummary {
            schedule: self.schedule.clone(),
            switch_iterations: self.switch_iterations.clone(),
            ledger: self.ledger.clone(),
            cost: self.cost(),
            wall_seconds: self.wall_seconds,
            flagged: self.flagged(),
            final_mean: self.ensemble.mean(),
            ensemble: self.ensemble.meta(seed),
        }
    }

    /// Writes `<stem>.json`, `<stem>_trace.csv` and `<stem>_ensemble.csv`
    /// into `dir`.
    pub fn write(&self, dir: &Path, stem: &str, seed: Option<u64>) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(&self.summary(seed))?;
        std::fs::write(dir.join(format!("{stem}.json")), json)?;
        self.trace.write_csv(&dir.join(format!("{stem}_trace.csv")))?;
        self.ensemble
            .save(&dir.join(format!("{stem}_ensemble.csv")), seed)
    }
}

/// Optional per-level tolerances, indexed like the schedule. Defaults to
/// `config.tolerance` everywhere.
#[derive(Default)]
pub struct MlOptions<'a> {
    pub tolerances: Option<Vec<f64>>,
    pub observer: Option<Observer<'a>>,
}

pub fn run_mlsvgd(
    initial: ParticleEnsemble,
    hierarchy: &[&dyn TargetLevel],
    schedule: &LevelSchedule,
    kernel: &RbfKernel,
    config: &SvgdConfig,
) -> Result<RunReport> {
    run_mlsvgd_with(initial, hierarchy, schedule, kernel, config, MlOptions::default())
}

pub fn run_mlsvgd_with(
    initial: ParticleEnsemble,
    hierarchy: &[&dyn TargetLevel],
    schedule: &LevelSchedule,
    kernel: &RbfKernel,
    config: &SvgdConfig,
    mut options: MlOptions<'_>,
) -> Result<RunReport> {
    config.validate()?;
    schedule.validate_for(hierarchy.len())?;
    if let Some(t) = &options.tolerances {
        if t.len() != schedule.levels().len() || t.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Argument(
                "per-level tolerances must be positive and match the schedule".into(),
            ));
        }
    }
    let particles = initial.count();
    let mut clock = RunClock::new();
    let mut ensemble = initial;
    let mut trace = IterationTrace::default();
    let mut ledger = CostLedger {
        particles,
        entries: Vec::with_capacity(schedule.levels().len()),
    };
    let mut switch_iterations = Vec::new();

    for (k, &level) in schedule.levels().iter().enumerate() {
        let target = hierarchy[level - 1];
        if target.level() != level {
            return Err(Error::Argument(format!(
                "hierarchy entry {level} reports level {}",
                target.level()
            )));
        }
        if k > 0 {
            switch_iterations.push(clock.iteration + 1);
        }
        let tolerance = options
            .tolerances
            .as_ref()
            .map_or(config.tolerance, |t| t[k]);
        let before = target.counters().snapshot();
        let started = clock.start.elapsed().as_secs_f64();
        let observer: Option<Observer<'_>> = match options.observer.as_mut() {
            Some(o) => Some(&mut **o),
            None => None,
        };
        let run = run_level(ensemble, target, kernel, config, tolerance, &mut clock, observer)?;
        let used = target.counters().snapshot().since(&before);
        ledger.entries.push(LevelEntry {
            level,
            cost_weight: target.cost_weight(),
            iterations: run.iterations,
            score_evaluations: used.score,
            density_evaluations: used.density,
            tolerance,
            tolerance_reached: run.tolerance_reached,
            wall_seconds: clock.start.elapsed().as_secs_f64() - started,
        });
        trace.records.extend(run.trace.records);
        ensemble = run.ensemble;
    }

    Ok(RunReport {
        schedule: schedule.clone(),
        ensemble,
        trace,
        switch_iterations,
        ledger,
        wall_seconds: clock.start.elapsed().as_secs_f64(),
    })
}

/// Iteration records belonging to `level`, in order.
pub fn level_segment(trace: &IterationTrace, level: usize) -> Vec<IterationRecord> {
    trace.records.iter().filter(|r| r.level == level).copied().collect()
}
