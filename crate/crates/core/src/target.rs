//! Target densities `π^(ℓ)` as seen by the samplers.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::divergence::GaussianDist;
use crate::error::Result;

/// One member of a hierarchy of unnormalized target densities.
pub trait TargetLevel: Send + Sync {
    fn dim(&self) -> usize;

    /// Level number `ℓ` (1-based).
    fn level(&self) -> usize;

    /// Cost weight `c_ℓ` charged per score evaluation.
    fn cost_weight(&self) -> f64;

    /// Unnormalized log-density; `-∞` outside the support.
    fn log_density(&self, theta: &[f64]) -> Result<f64>;

    /// `∇ log π^(ℓ)(θ)`.
    fn score(&self, theta: &[f64]) -> Result<Vec<f64>>;

    /// Score of particle `slot`. Implementations may reuse per-slot solver
    /// state between calls; values agree with [`score`](Self::score) up to
    /// solver tolerance.
    fn score_slot(&self, slot: usize, theta: &[f64]) -> Result<Vec<f64>> {
        let _ = slot;
        self.score(theta)
    }

    /// Log-density with per-slot solver state, as for
    /// [`score_slot`](Self::score_slot).
    fn log_density_slot(&self, slot: usize, theta: &[f64]) -> Result<f64> {
        let _ = slot;
        self.log_density(theta)
    }

    /// Forgets per-slot state; called at the start of every level segment so
    /// runs do not depend on what was evaluated before.
    fn begin_run(&self) {}

    fn counters(&self) -> &EvalCounters;

    fn label(&self) -> String {
        format!("level {}", self.level())
    }
}

/// Monotone evaluation counters, safe to bump from worker threads.
#[derive(Debug, Default)]
pub struct EvalCounters {
    density: AtomicU64,
    score: AtomicU64,
    forward: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CounterSnapshot {
    pub density: u64,
    pub score: u64,
    pub forward: u64,
}

impl EvalCounters {
    pub fn add_density(&self, n: u64) {
        self.density.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_score(&self, n: u64) {
        self.score.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_forward(&self, n: u64) {
        self.forward.fetch_add(n, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            density: self.density.load(Ordering::Relaxed),
            score: self.score.load(Ordering::Relaxed),
            forward: self.forward.load(Ordering::Relaxed),
        }
    }
}

impl CounterSnapshot {
    pub fn since(&self, earlier: &CounterSnapshot) -> CounterSnapshot {
        CounterSnapshot {
            density: self.density - earlier.density,
            score: self.score - earlier.score,
            forward: self.forward - earlier.forward,
        }
    }
}

/// Analytic Gaussian level, used for the synthetic hierarchy and in tests.
#[derive(Debug)]
pub struct GaussianTarget {
    dist: GaussianDist,
    level: usize,
    cost_weight: f64,
    counters: EvalCounters,
}

impl GaussianTarget {
    pub fn new(dist: GaussianDist, level: usize, cost_weight: f64) -> Self {
        Self {
            dist,
            level,
            cost_weight,
            counters: EvalCounters::default(),
        }
    }

    pub fn dist(&self) -> &GaussianDist {
        &self.dist
    }
}

impl TargetLevel for GaussianTarget {
    fn dim(&self) -> usize {
        self.dist.dim()
    }

    fn level(&self) -> usize {
        self.level
    }

    fn cost_weight(&self) -> f64 {
        self.cost_weight
    }

    fn log_density(&self, theta: &[f64]) -> Result<f64> {
        self.counters.add_density(1);
        self.dist.log_pdf(theta)
    }

    fn score(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.counters.add_score(1);
        self.dist.score(theta)
    }

    fn counters(&self) -> &EvalCounters {
        &self.counters
    }

    fn label(&self) -> String {
        format!("gaussian level {}", self.level)
    }
}
