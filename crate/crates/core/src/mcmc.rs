//! Delayed-rejection adaptive Metropolis (DRAM) reference sampler and the
//! replicate mean-error metric.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{cholesky, solve_lower};
use crate::rng::seeded;
use crate::target::TargetLevel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DramConfig {
    /// Diagonal of the initial proposal covariance.
    pub initial_proposal_var: f64,
    pub burn_in: usize,
    /// Post-burn-in iterations; `samples / stride` of them are kept.
    pub samples: usize,
    pub stride: usize,
    pub adapt: bool,
    pub adapt_start: usize,
    pub adapt_interval: usize,
    pub delayed_rejection: bool,
    /// Second-stage scale on the Cholesky factor of the proposal.
    pub dr_scale: f64,
    pub jitter: f64,
    /// Consecutive rejections before the chain is flagged as stuck.
    pub stuck_limit: usize,
    pub seed: u64,
    /// Start of the chain; defaults to the prior mean supplied by the caller.
    pub initial: Option<Vec<f64>>,
    /// Keep every first-stage decision for replay checks.
    pub record_steps: bool,
}

impl Default for DramConfig {
    fn default() -> Self {
        Self {
            initial_proposal_var: 1e-2,
            burn_in: 10_000,
            samples: 20_000,
            stride: 2,
            adapt: true,
            adapt_start: 1000,
            adapt_interval: 100,
            delayed_rejection: true,
            dr_scale: 0.2,
            jitter: 1e-10,
            stuck_limit: 1000,
            seed: 0,
            initial: None,
            record_steps: false,
        }
    }
}

impl DramConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("dram: {m}")));
        if !(self.initial_proposal_var > 0.0 && self.initial_proposal_var.is_finite()) {
            return bad("initial_proposal_var must be positive");
        }
        if self.samples == 0 || self.stride == 0 || self.samples < self.stride {
            return bad("samples and stride must be positive with stride <= samples");
        }
        if self.adapt && (self.adapt_interval == 0 || self.adapt_start < 2) {
            return bad("adapt_interval must be positive and adapt_start at least 2");
        }
        if !(self.dr_scale > 0.0 && self.dr_scale < 1.0) {
            return bad("dr_scale must lie in (0, 1)");
        }
        if !(self.jitter >= 0.0) {
            return bad("jitter must be nonnegative");
        }
        if self.stuck_limit == 0 {
            return bad("stuck_limit must be positive");
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.burn_in + self.samples
    }

    pub fn retained_count(&self) -> usize {
        self.samples / self.stride
    }
}

/// Source of the proposal normals and acceptance uniforms. Tests script it.
pub trait Draws {
    fn normals(&mut self, d: usize) -> Vec<f64>;
    fn uniform(&mut self) -> f64;
}

impl<R: Rng> Draws for R {
    fn normals(&mut self, d: usize) -> Vec<f64> {
        (0..d).map(|_| self.sample(StandardNormal)).collect()
    }

    fn uniform(&mut self) -> f64 {
        self.random::<f64>()
    }
}

/// One logged first-stage decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub current: Vec<f64>,
    pub log_current: f64,
    pub proposal: Vec<f64>,
    pub log_proposal: f64,
    pub uniform: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Chain {
    pub dim: usize,
    /// Row-major retained samples.
    pub samples: Vec<f64>,
    /// Iteration index (1-based) of each retained sample.
    pub retained_iterations: Vec<usize>,
    pub stage1_accepted: usize,
    pub stage1_proposed: usize,
    pub stage2_accepted: usize,
    pub stage2_proposed: usize,
    /// `(iteration, proposal covariance)` after every adaptation.
    pub covariance_history: Vec<(usize, Vec<f64>)>,
    pub stuck: bool,
    /// Proposals whose density could not be evaluated; they count as rejected.
    pub failed_evaluations: usize,
    pub steps: Vec<StepRecord>,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.retained_iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained_iterations.is_empty()
    }

    pub fn sample(&self, k: usize) -> &[f64] {
        &self.samples[k * self.dim..(k + 1) * self.dim]
    }

    pub fn acceptance_stage1(&self) -> f64 {
        ratio(self.stage1_accepted, self.stage1_proposed)
    }

    pub fn acceptance_stage2(&self) -> f64 {
        ratio(self.stage2_accepted, self.stage2_proposed)
    }

    pub fn covariance(&self) -> Vec<f64> {
        sample_covariance(&self.samples, self.dim)
    }

    pub fn summary(&self, config: &DramConfig) -> ChainSummary {
        ChainSummary {
            mean: reference_mean(self).unwrap_or_default(),
            covariance: self.covariance(),
            acceptance_stage1: self.acceptance_stage1(),
            acceptance_stage2: self.acceptance_stage2(),
            retained: self.len(),
            stuck: self.stuck,
            failed_evaluations: self.failed_evaluations,
            config: config.clone(),
        }
    }

    pub fn write_samples_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["iteration".to_string()];
        header.extend((1..=self.dim).map(|k| format!("theta{k}")));
        w.write_record(&header)?;
        for (k, it) in self.retained_iterations.iter().enumerate() {
            let mut row = vec![it.to_string()];
            row.extend(self.sample(k).iter().map(|v| format!("{v:e}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// What gets cached as the MCMC reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub mean: Vec<f64>,
    pub covariance: Vec<f64>,
    pub acceptance_stage1: f64,
    pub acceptance_stage2: f64,
    pub retained: usize,
    pub stuck: bool,
    pub failed_evaluations: usize,
    pub config: DramConfig,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn sample_covariance(rows: &[f64], d: usize) -> Vec<f64> {
    let n = rows.len() / d.max(1);
    let mut c = vec![0.0; d * d];
    if n < 2 {
        return c;
    }
    let mut mean = vec![0.0; d];
    for r in rows.chunks(d) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    for r in rows.chunks(d) {
        for a in 0..d {
            for b in 0..d {
                c[a * d + b] += (r[a] - mean[a]) * (r[b] - mean[b]);
            }
        }
    }
    c.iter_mut().for_each(|v| *v /= (n - 1) as f64);
    c
}

/// Running mean and scatter of the chain history, shifted by the start point
/// to keep the sums well conditioned.
struct History {
    shift: Vec<f64>,
    n: usize,
    sum: Vec<f64>,
    outer: Vec<f64>,
}

impl History {
    fn new(shift: &[f64]) -> Self {
        let d = shift.len();
        Self {
            shift: shift.to_vec(),
            n: 0,
            sum: vec![0.0; d],
            outer: vec![0.0; d * d],
        }
    }

    fn push(&mut self, x: &[f64]) {
        let d = x.len();
        let z: Vec<f64> = x.iter().zip(&self.shift).map(|(a, b)| a - b).collect();
        for a in 0..d {
            self.sum[a] += z[a];
            for b in 0..d {
                self.outer[a * d + b] += z[a] * z[b];
            }
        }
        self.n += 1;
    }

    fn covariance(&self) -> Vec<f64> {
        let d = self.sum.len();
        let n = self.n as f64;
        let mut c = vec![0.0; d * d];
        for a in 0..d {
            for b in 0..d {
                c[a * d + b] = (self.outer[a * d + b] - self.sum[a] * self.sum[b] / n) / (n - 1.0);
            }
        }
        c
    }
}

struct Proposal {
    chol: Vec<f64>,
}

impl Proposal {
    fn diagonal(d: usize, var: f64) -> Result<Self> {
        let mut cov = vec![0.0; d * d];
        for a in 0..d {
            cov[a * d + a] = var;
        }
        Ok(Self { chol: cholesky(&cov, d)? })
    }

    fn step(&self, x: &[f64], z: &[f64], scale: f64) -> Vec<f64> {
        let d = x.len();
        (0..d)
            .map(|a| x[a] + scale * (0..=a).map(|b| self.chol[a * d + b] * z[b]).sum::<f64>())
            .collect()
    }

    /// `log q(from -> to)` up to a constant, first-stage kernel.
    fn log_q(&self, from: &[f64], to: &[f64]) -> f64 {
        let r: Vec<f64> = to.iter().zip(from).map(|(a, b)| a - b).collect();
        let w = solve_lower(&self.chol, r.len(), &r);
        -0.5 * w.iter().map(|v| v * v).sum::<f64>()
    }
}

fn log1m_exp_min0(log_a: f64) -> f64 {
    // ln(1 - min(1, e^log_a))
    if log_a >= 0.0 {
        f64::NEG_INFINITY
    } else {
        (-log_a.exp()).ln_1p()
    }
}

/// Runs a DRAM chain on `target`, started at `config.initial` or `start`.
pub fn dram_sample(target: &dyn TargetLevel, start: &[f64], config: &DramConfig) -> Result<Chain> {
    let mut rng = seeded(config.seed);
    dram_sample_with(target, start, config, &mut rng)
}

pub fn dram_sample_with(
    target: &dyn TargetLevel,
    start: &[f64],
    config: &DramConfig,
    draws: &mut dyn Draws,
) -> Result<Chain> {
    config.validate()?;
    let d = target.dim();
    let x0 = config.initial.as_deref().unwrap_or(start).to_vec();
    check_dim(d, x0.len())?;
    target.begin_run();

    let eval = |theta: &[f64], failed: &mut usize| -> Result<f64> {
        match target.log_density_slot(0, theta) {
            Ok(v) if v.is_nan() => {
                *failed += 1;
                Ok(f64::NEG_INFINITY)
            }
            Ok(v) => Ok(v),
            Err(Error::Solve { .. }) | Err(Error::NewtonDivergence { .. }) => {
                *failed += 1;
                Ok(f64::NEG_INFINITY)
            }
            Err(e) => Err(e),
        }
    };

    let mut chain = Chain {
        dim: d,
        samples: Vec::with_capacity(config.retained_count() * d),
        retained_iterations: Vec::with_capacity(config.retained_count()),
        stage1_accepted: 0,
        stage1_proposed: 0,
        stage2_accepted: 0,
        stage2_proposed: 0,
        covariance_history: Vec::new(),
        stuck: false,
        failed_evaluations: 0,
        steps: Vec::new(),
    };

    let mut x = x0.clone();
    let mut lx = eval(&x, &mut chain.failed_evaluations)?;
    if !lx.is_finite() {
        return Err(Error::Argument(format!("chain start {x:?} has zero density")));
    }
    let mut prop = Proposal::diagonal(d, config.initial_proposal_var)?;
    let mut history = History::new(&x0);
    history.push(&x);
    let mut rejections = 0usize;

    for t in 1..=config.total_iterations() {
        let z = draws.normals(d);
        let y1 = prop.step(&x, &z, 1.0);
        let l1 = eval(&y1, &mut chain.failed_evaluations)?;
        let u = draws.uniform();
        let log_a1 = l1 - lx;
        let accept1 = l1 > f64::NEG_INFINITY && u.ln() < log_a1;
        chain.stage1_proposed += 1;
        if config.record_steps {
            chain.steps.push(StepRecord {
                iteration: t,
                current: x.clone(),
                log_current: lx,
                proposal: y1.clone(),
                log_proposal: l1,
                uniform: u,
                accepted: accept1,
            });
        }
        let mut moved = false;
        if accept1 {
            x = y1;
            lx = l1;
            chain.stage1_accepted += 1;
            moved = true;
        } else if config.delayed_rejection {
            let z2 = draws.normals(d);
            let y2 = prop.step(&x, &z2, config.dr_scale);
            let l2 = eval(&y2, &mut chain.failed_evaluations)?;
            let u2 = draws.uniform();
            chain.stage2_proposed += 1;
            if l2 > f64::NEG_INFINITY {
                // Tierney-Mira ratio; the symmetric second-stage kernel cancels.
                let num = l2 + prop.log_q(&y2, &y1) + log1m_exp_min0(l1 - l2);
                let den = lx + prop.log_q(&x, &y1) + log1m_exp_min0(log_a1);
                if u2.ln() < num - den {
                    x = y2;
                    lx = l2;
                    chain.stage2_accepted += 1;
                    moved = true;
                }
            }
        }
        if moved {
            rejections = 0;
        } else {
            rejections += 1;
            if rejections == config.stuck_limit {
                chain.stuck = true;
                log::warn!("dram: {rejections} consecutive rejections at iteration {t}");
            }
        }
        history.push(&x);
        if config.adapt && t >= config.adapt_start && t % config.adapt_interval == 0 {
            let mut c = history.covariance();
            let s = 2.4 * 2.4 / d as f64;
            c.iter_mut().for_each(|v| *v *= s);
            for a in 0..d {
                c[a * d + a] += config.jitter;
            }
            // A degenerate history (for example a stuck chain) keeps the old proposal.
            if let Ok(chol) = cholesky(&c, d) {
                chain.covariance_history.push((t, c));
                prop = Proposal { chol };
            }
        }
        if t > config.burn_in && (t - config.burn_in) % config.stride == 0 {
            chain.samples.extend_from_slice(&x);
            chain.retained_iterations.push(t);
        }
    }
    Ok(chain)
}

/// Re-checks every logged first-stage decision against the Metropolis rule.
/// Returns the iterations whose decision disagrees.
pub fn replay_metropolis(steps: &[StepRecord]) -> Vec<usize> {
    steps
        .iter()
        .filter(|s| {
            let ratio = (s.log_proposal - s.log_current).exp().min(1.0);
            (s.uniform < ratio) != s.accepted
        })
        .map(|s| s.iteration)
        .collect()
}

pub fn reference_mean(chain: &Chain) -> Result<Vec<f64>> {
    if chain.is_empty() {
        return Err(Error::Argument("empty chain".into()));
    }
    let n = chain.len() as f64;
    let mut m = vec![0.0; chain.dim];
    for r in chain.samples.chunks(chain.dim) {
        for (a, v) in m.iter_mut().zip(r) {
            *a += v;
        }
    }
    m.iter_mut().for_each(|v| *v /= n);
    Ok(m)
}

/// `(1/R) Σ_r ‖θ̄ − θ^(r)‖₂` over the replicate particle means.
pub fn mean_error_metric(reference: &[f64], means: &[Vec<f64>], expected: usize) -> Result<f64> {
    if means.len() != expected {
        return Err(Error::Argument(format!(
            "expected {expected} replicate means, got {}",
            means.len()
        )));
    }
    if expected == 0 {
        return Err(Error::Argument("no replicates".into()));
    }
    let mut total = 0.0;
    for m in means {
        check_dim(reference.len(), m.len())?;
        total += reference.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    }
    Ok(total / expected as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::GaussianDist;
    use crate::target::GaussianTarget;

    struct Scripted {
        normals: Vec<Vec<f64>>,
        uniforms: Vec<f64>,
    }

    impl Draws for Scripted {
        fn normals(&mut self, _d: usize) -> Vec<f64> {
            self.normals.remove(0)
        }
        fn uniform(&mut self) -> f64 {
            self.uniforms.remove(0)
        }
    }

    fn plain(burn_in: usize, samples: usize) -> DramConfig {
        DramConfig {
            initial_proposal_var: 1.0,
            burn_in,
            samples,
            stride: 1,
            adapt: false,
            delayed_rejection: false,
            record_steps: true,
            ..Default::default()
        }
    }

    fn std_normal(d: usize) -> GaussianTarget {
        GaussianTarget::new(GaussianDist::diagonal(vec![0.0; d], vec![1.0; d]).unwrap(), 1, 1.0)
    }

    #[test]
    fn scripted_random_walk_trace() {
        // 1D standard normal, unit proposal. log pi(x) = -x^2/2.
        // x0 = 0
        // z=1   -> y=1,   ratio e^-0.5 = 0.6065, u=0.5 accept -> 1
        // z=1   -> y=2,   ratio e^-1.5 = 0.2231, u=0.3 reject -> 1
        // z=-2  -> y=-1,  ratio 1,               u=0.99 accept -> -1
        // z=-1  -> y=-2,  ratio e^-1.5,          u=0.2 accept -> -2
        // z=0.5 -> y=-1.5 ratio e^0.875 > 1,     u=0.999 accept -> -1.5
        let t = std_normal(1);
        let mut s = Scripted {
            normals: vec![vec![1.0], vec![1.0], vec![-2.0], vec![-1.0], vec![0.5]],
            uniforms: vec![0.5, 0.3, 0.99, 0.2, 0.999],
        };
        let chain = dram_sample_with(&t, &[0.0], &plain(0, 5), &mut s).unwrap();
        let got: Vec<f64> = chain.samples.clone();
        assert_eq!(got, vec![1.0, 1.0, -1.0, -2.0, -1.5]);
        let acc: Vec<bool> = chain.steps.iter().map(|s| s.accepted).collect();
        assert_eq!(acc, vec![true, false, true, true, true]);
        assert_eq!(chain.stage1_accepted, 4);
        assert!(replay_metropolis(&chain.steps).is_empty());
    }

    #[test]
    fn replay_catches_a_tampered_step() {
        let t = std_normal(2);
        let cfg = DramConfig { seed: 3, ..plain(0, 300) };
        let mut chain = dram_sample(&t, &[0.0, 0.0], &cfg).unwrap();
        assert!(replay_metropolis(&chain.steps).is_empty());
        let k = chain.steps.iter().position(|s| !s.accepted).unwrap();
        chain.steps[k].accepted = true;
        assert_eq!(replay_metropolis(&chain.steps), vec![chain.steps[k].iteration]);
    }

    #[test]
    fn delayed_rejection_matches_hand_ratio() {
        // Stage 1 from 0 to 3 rejected (u = 0.9 > e^-4.5), stage 2 to 0.2*(-5) = -1.
        // num = -0.5 + (-(3+1)^2/2) + ln(1 - e^{-4.5+0.5})
        // den = 0 + (-(3)^2/2) + ln(1 - e^-4.5)
        let t = std_normal(1);
        let num = -0.5 - 8.0 + (1.0 - (-4.0f64).exp()).ln();
        let den = -4.5 + (1.0 - (-4.5f64).exp()).ln();
        let a2 = (num - den).exp();
        assert!(a2 > 0.01 && a2 < 0.05, "{a2}");
        for (u2, expect) in [(a2 * 0.99, -1.0), (a2 * 1.01, 0.0)] {
            let mut s = Scripted { normals: vec![vec![3.0], vec![-5.0]], uniforms: vec![0.9, u2] };
            let cfg = DramConfig { delayed_rejection: true, ..plain(0, 1) };
            let chain = dram_sample_with(&t, &[0.0], &cfg, &mut s).unwrap();
            assert!((chain.samples[0] - expect).abs() < 1e-15, "u2 {u2}");
            assert_eq!(chain.stage2_proposed, 1);
        }
    }

    #[test]
    fn thinning_indices() {
        let t = std_normal(1);
        let cfg = DramConfig { burn_in: 50, samples: 40, stride: 4, ..Default::default() };
        let chain = dram_sample(&t, &[0.0], &cfg).unwrap();
        let want: Vec<usize> = (1..=10).map(|k| 50 + 4 * k).collect();
        assert_eq!(chain.retained_iterations, want);
        assert_eq!(chain.len(), cfg.retained_count());
    }

    #[test]
    fn seeded_chains_are_identical() {
        let t = std_normal(2);
        let cfg = DramConfig { burn_in: 500, samples: 1000, seed: 11, ..Default::default() };
        let a = dram_sample(&t, &[0.0, 0.0], &cfg).unwrap();
        let b = dram_sample(&t, &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(a.samples, b.samples);
        let c = dram_sample(&t, &[0.0, 0.0], &DramConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn adaptation_records_history() {
        let t = std_normal(2);
        let cfg = DramConfig { burn_in: 2000, samples: 2000, seed: 5, ..Default::default() };
        let chain = dram_sample(&t, &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(chain.covariance_history.first().unwrap().0, 1000);
        assert_eq!(chain.covariance_history.len(), 31);
        let (_, c) = chain.covariance_history.last().unwrap();
        // 2.4^2/2 * I roughly
        assert!((c[0] - 2.88).abs() < 1.0 && (c[3] - 2.88).abs() < 1.0, "{c:?}");
        assert!((0.0..=1.0).contains(&chain.acceptance_stage1()));
        assert!((0.0..=1.0).contains(&chain.acceptance_stage2()));
    }

    #[test]
    fn stuck_chain_flagged() {
        // Start on a support edge with a proposal so wide nothing is accepted.
        let t = GaussianTarget::new(GaussianDist::diagonal(vec![0.0], vec![1e-6]).unwrap(), 1, 1.0);
        let cfg = DramConfig {
            initial_proposal_var: 1e6,
            burn_in: 0,
            samples: 1500,
            stride: 1,
            adapt: false,
            stuck_limit: 1000,
            ..Default::default()
        };
        let chain = dram_sample(&t, &[0.0], &cfg).unwrap();
        assert!(chain.stuck);
    }

    #[test]
    fn reference_mean_small_cases() {
        let mut chain = dram_sample(&std_normal(2), &[0.0, 0.0], &DramConfig { burn_in: 0, samples: 1, stride: 1, ..Default::default() }).unwrap();
        assert_eq!(reference_mean(&chain).unwrap(), chain.sample(0).to_vec());
        chain.samples = vec![1.0, 2.0, 3.0, 6.0];
        chain.retained_iterations = vec![1, 2];
        assert_eq!(reference_mean(&chain).unwrap(), vec![2.0, 4.0]);
        chain.samples.clear();
        chain.retained_iterations.clear();
        assert!(reference_mean(&chain).is_err());
    }

    #[test]
    fn mean_error_metric_cases() {
        let r = vec![1.0, 2.0];
        let same = vec![r.clone(); 10];
        assert_eq!(mean_error_metric(&r, &same, 10).unwrap(), 0.0);
        let mut one = same.clone();
        one[3][1] += 1.0;
        assert!((mean_error_metric(&r, &one, 10).unwrap() - 0.1).abs() < 1e-15);
        assert!(mean_error_metric(&r, &same[..9], 10).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DramConfig::default().validate().is_ok());
        assert!(DramConfig { stride: 0, ..Default::default() }.validate().is_err());
        assert!(DramConfig { dr_scale: 1.5, ..Default::default() }.validate().is_err());
        let s = serde_json::to_string(&DramConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<DramConfig>(&s).unwrap(), DramConfig::default());
    }
}
