//! Aggregation of an artifact directory into `summary.json`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::experiment::{schedule_label, RunFile};
use super::reference::read_reference;
use super::write_atomic;
use crate::error::{Error, Result};
use crate::mcmc::mean_error_metric;
use crate::mlsvgd::LevelSchedule;
use crate::problems::CostMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        let n = v.len();
        // exact for constant samples, where the summed mean can be off by an ulp
        let mean = if v[0] == v[n - 1] { v[0] } else { v.iter().sum::<f64>() / n as f64 };
        let var = if n > 1 {
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Some(Self {
            count: n,
            mean,
            std: var.sqrt(),
            min: v[0],
            median,
            max: v[n - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub tolerance: f64,
    pub schedule: String,
    pub baseline: bool,
    pub replicates: usize,
    pub missing_seeds: Vec<u64>,
    pub flagged: usize,
    pub cost: Option<Stats>,
    pub wall_seconds: Option<Stats>,
    pub iterations: Option<Stats>,
    /// Mean distance of the final particle means from the reference.
    pub mean_error: Option<f64>,
    pub speedup: Option<Stats>,
    pub wall_speedup: Option<Stats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub cost_mode: CostMode,
    pub seeds: Vec<u64>,
    pub reference_mean: Option<Vec<f64>>,
    pub groups: Vec<GroupSummary>,
    pub flagged_runs: Vec<String>,
    /// Human-readable notes on whatever is missing.
    pub gaps: Vec<String>,
}

impl Summary {
    pub fn group(&self, tolerance: f64, schedule: &str) -> Option<&GroupSummary> {
        self.groups
            .iter()
            .find(|g| g.tolerance == tolerance && g.schedule == schedule)
    }
}

fn read_config(dir: &Path) -> Result<ExperimentConfig> {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("config.json"))?)?;
    let cfg = v
        .get("config")
        .cloned()
        .ok_or_else(|| Error::Config("config.json lacks a config section".into()))?;
    Ok(serde_json::from_value(cfg)?)
}

fn read_runs(dir: &Path, gaps: &mut Vec<String>) -> Result<Vec<(String, RunFile)>> {
    let runs = dir.join("runs");
    let mut out = Vec::new();
    if !runs.is_dir() {
        gaps.push("no runs directory".into());
        return Ok(out);
    }
    let mut names: Vec<_> = std::fs::read_dir(&runs)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    names.sort();
    for p in names {
        let stem = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        match std::fs::read_to_string(&p).map_err(Error::from).and_then(|t| Ok(serde_json::from_str::<RunFile>(&t)?)) {
            Ok(f) => out.push((stem, f)),
            Err(e) => gaps.push(format!("{stem}: unreadable ({e})")),
        }
    }
    Ok(out)
}

/// Aggregates replicates per tolerance and schedule. Missing or unreadable
/// runs produce a partial summary with the gaps listed.
pub fn summarize(dir: &Path) -> Result<Summary> {
    let cfg = read_config(dir)?;
    let mut gaps = Vec::new();
    let runs = read_runs(dir, &mut gaps)?;
    let hash = cfg.hash();
    let runs: Vec<(String, RunFile)> = runs
        .into_iter()
        .filter(|(stem, f)| {
            let ok = f.provenance.config_hash == hash;
            if !ok {
                gaps.push(format!("{stem}: written by config {}", f.provenance.config_hash));
            }
            ok
        })
        .collect();
    let reference = match read_reference(&cfg.reference_path()) {
        Ok(r) if r.reference_hash == cfg.reference_hash() => Some(r.chain.mean),
        Ok(_) => {
            gaps.push("reference was computed for a different problem".into());
            None
        }
        Err(_) => {
            gaps.push("no reference".into());
            None
        }
    };

    let baseline_label = schedule_label(&LevelSchedule::single(cfg.baseline_level())?, true);
    let base_for = |seed: u64| {
        runs.iter()
            .map(|(_, f)| f)
            .find(|f| f.baseline && f.provenance.seed == Some(seed))
    };

    let mut groups = Vec::new();
    for (t, &tol) in cfg.tolerances.iter().enumerate() {
        let mut keys: Vec<(String, bool)> = vec![(baseline_label.clone(), true)];
        keys.extend(cfg.schedules.iter().map(|s| (s.label(), false)));
        for (label, baseline) in keys {
            let mut by_seed: BTreeMap<u64, &RunFile> = BTreeMap::new();
            for (_, f) in &runs {
                let matches = f.label() == label
                    && if baseline { true } else { f.tolerance == tol };
                if matches {
                    if let Some(s) = f.provenance.seed {
                        by_seed.insert(s, f);
                    }
                }
            }
            let missing: Vec<u64> = cfg.seeds.iter().copied().filter(|s| !by_seed.contains_key(s)).collect();
            if !missing.is_empty() {
                gaps.push(format!("tol {tol:e} {label}: missing seeds {missing:?}"));
            }
            // Baseline numbers at this tolerance come from its crossing record.
            let point = |f: &RunFile| -> Option<(f64, f64, f64, bool)> {
                if baseline {
                    f.crossings
                        .get(t)
                        .copied()
                        .flatten()
                        .map(|c| (c.cost, c.wall_seconds, c.iteration as f64, false))
                } else {
                    Some((
                        f.summary.cost,
                        f.summary.wall_seconds,
                        f.summary.ledger.iterations() as f64,
                        f.summary.flagged,
                    ))
                }
            };
            let pts: Vec<(u64, (f64, f64, f64, bool))> = by_seed
                .iter()
                .map(|(s, f)| (*s, point(f)))
                .filter_map(|(s, p)| p.map(|p| (s, p)))
                .collect();
            let flagged = by_seed.len() - pts.iter().filter(|(_, p)| !p.3).count();
            let costs: Vec<f64> = pts.iter().map(|(_, p)| p.0).collect();
            let walls: Vec<f64> = pts.iter().map(|(_, p)| p.1).collect();
            let its: Vec<f64> = pts.iter().map(|(_, p)| p.2).collect();
            let mut speed = Vec::new();
            let mut wall_speed = Vec::new();
            if !baseline {
                for (s, p) in &pts {
                    if let Some(c) = base_for(*s).and_then(|b| b.crossings.get(t).copied().flatten()) {
                        speed.push(c.cost / p.0);
                        wall_speed.push(c.wall_seconds / p.1);
                    }
                }
            }
            let mean_error = match &reference {
                Some(r) if missing.is_empty() => {
                    let means: Vec<Vec<f64>> = by_seed.values().map(|f| f.summary.final_mean.clone()).collect();
                    Some(mean_error_metric(r, &means, cfg.seeds.len())?)
                }
                _ => None,
            };
            groups.push(GroupSummary {
                tolerance: tol,
                schedule: label,
                baseline,
                replicates: by_seed.len(),
                missing_seeds: missing,
                flagged,
                cost: Stats::of(&costs),
                wall_seconds: Stats::of(&walls),
                iterations: Stats::of(&its),
                mean_error,
                speedup: Stats::of(&speed),
                wall_speedup: Stats::of(&wall_speed),
            });
        }
    }
    let flagged_runs = runs
        .iter()
        .filter(|(_, f)| f.summary.flagged)
        .map(|(s, _)| s.clone())
        .collect();
    let summary = Summary {
        config_hash: hash,
        cost_mode: cfg.cost_mode,
        seeds: cfg.seeds.clone(),
        reference_mean: reference,
        groups,
        flagged_runs,
        gaps,
    };
    write_atomic(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_of_identical_values_have_zero_spread() {
        let s = Stats::of(&[0.1; 10]).unwrap();
        assert_eq!((s.mean, s.std, s.min, s.median, s.max), (0.1, 0.0, 0.1, 0.1, 0.1));
        let one = Stats::of(&[4.0]).unwrap();
        assert_eq!((one.mean, one.std, one.median), (4.0, 0.0, 4.0));
        assert!(Stats::of(&[]).is_none());
        assert_eq!(Stats::of(&[3.0, 1.0, 2.0, 10.0]).unwrap().median, 2.5);
    }
}
