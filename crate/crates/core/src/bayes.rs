//! Posterior levels `π^(ℓ)(θ) ∝ exp(−½ ‖y − G_ℓ(θ)‖²_{Γ⁻¹}) π₀(θ)` with
//! finite-difference likelihood gradients.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::forward::ForwardModel;
use crate::target::{EvalCounters, TargetLevel};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Finite-difference step for likelihood gradients.
pub const DEFAULT_FD_STEP: f64 = 1.0 / 64.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mean: Vec<f64>,
    pub diag_cov: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogNormalPrior {
    pub mu: f64,
    pub sigma: f64,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prior {
    Gaussian(GaussianPrior),
    LogNormal(LogNormalPrior),
}

impl Prior {
    pub fn gaussian(mean: Vec<f64>, diag_cov: Vec<f64>) -> Result<Self> {
        let p = Prior::Gaussian(GaussianPrior { mean, diag_cov });
        p.validate()?;
        Ok(p)
    }

    pub fn log_normal(mu: f64, sigma: f64, dim: usize) -> Result<Self> {
        let p = Prior::LogNormal(LogNormalPrior { mu, sigma, dim });
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Prior::Gaussian(g) => {
                check_dim(g.mean.len(), g.diag_cov.len())?;
                if g.mean.is_empty() || g.diag_cov.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                    return Err(Error::Argument("prior variances must be positive".into()));
                }
            }
            Prior::LogNormal(l) => {
                if l.dim == 0 || !(l.sigma > 0.0) || !l.mu.is_finite() {
                    return Err(Error::Argument("log-normal prior needs sigma > 0 and dim > 0".into()));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            Prior::Gaussian(g) => g.mean.len(),
            Prior::LogNormal(l) => l.dim,
        }
    }

    /// Distance from `θ` to the edge of the support (infinite for Gaussians).
    pub fn support_margin(&self, theta: &[f64]) -> f64 {
        match self {
            Prior::Gaussian(_) => f64::INFINITY,
            Prior::LogNormal(_) => theta.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }

    /// Normalized log-density; `−∞` off the support.
    pub fn log_density(&self, theta: &[f64]) -> Result<f64> {
        check_dim(self.dim(), theta.len())?;
        Ok(match self {
            Prior::Gaussian(g) => theta
                .iter()
                .zip(&g.mean)
                .zip(&g.diag_cov)
                .map(|((t, m), v)| -0.5 * ((t - m) * (t - m) / v + v.ln() + LN_2PI))
                .sum(),
            Prior::LogNormal(l) => {
                if theta.iter().any(|t| !(*t > 0.0)) {
                    return Ok(f64::NEG_INFINITY);
                }
                let s2 = l.sigma * l.sigma;
                theta
                    .iter()
                    .map(|t| {
                        let z = t.ln() - l.mu;
                        -t.ln() - l.sigma.ln() - 0.5 * LN_2PI - 0.5 * z * z / s2
                    })
                    .sum()
            }
        })
    }

    pub fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), theta.len())?;
        match self {
            Prior::Gaussian(g) => Ok(theta
                .iter()
                .zip(&g.mean)
                .zip(&g.diag_cov)
                .map(|((t, m), v)| -(t - m) / v)
                .collect()),
            Prior::LogNormal(l) => {
                if theta.iter().any(|t| !(*t > 0.0)) {
                    return Err(Error::Argument("log-normal gradient outside support".into()));
                }
                let s2 = l.sigma * l.sigma;
                Ok(theta.iter().map(|t| -(1.0 + (t.ln() - l.mu) / s2) / t).collect())
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Prior::Gaussian(g) => g
                .mean
                .iter()
                .zip(&g.diag_cov)
                .map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            Prior::LogNormal(l) => (0..l.dim)
                .map(|_| (l.mu + l.sigma * rng.sample::<f64, _>(StandardNormal)).exp())
                .collect(),
        }
    }
}

/// Data `y` with independent Gaussian noise of variances `Γ_ii`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianLikelihood {
    pub data: Vec<f64>,
    pub noise_var: Vec<f64>,
}

impl GaussianLikelihood {
    pub fn new(data: Vec<f64>, noise_var: Vec<f64>) -> Result<Self> {
        check_dim(data.len(), noise_var.len())?;
        if data.is_empty() || noise_var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Argument("noise variances must be positive".into()));
        }
        Ok(Self { data, noise_var })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `−½ (y − g)ᵀ Γ⁻¹ (y − g)`.
    pub fn log_likelihood(&self, predicted: &[f64]) -> Result<f64> {
        check_dim(self.data.len(), predicted.len())?;
        Ok(-0.5
            * self
                .data
                .iter()
                .zip(predicted)
                .zip(&self.noise_var)
                .map(|((y, g), v)| (y - g) * (y - g) / v)
                .sum::<f64>())
    }
}

pub struct PosteriorLevel {
    prior: Prior,
    likelihood: Arc<GaussianLikelihood>,
    model: Box<dyn ForwardModel>,
    level: usize,
    fd_step: f64,
    cost_weight: f64,
    counters: EvalCounters,
}

impl PosteriorLevel {
    pub fn new(
        prior: Prior,
        likelihood: Arc<GaussianLikelihood>,
        model: Box<dyn ForwardModel>,
        level: usize,
        fd_step: f64,
        cost_weight: f64,
    ) -> Result<Self> {
        prior.validate()?;
        check_dim(prior.dim(), model.parameter_dim())?;
        check_dim(likelihood.len(), model.output_dim())?;
        if level == 0 {
            return Err(Error::Argument("levels are 1-based".into()));
        }
        if !(fd_step > 0.0) || !(cost_weight > 0.0) {
            return Err(Error::Argument("fd_step and cost weight must be positive".into()));
        }
        Ok(Self {
            prior,
            likelihood,
            model,
            level,
            fd_step,
            cost_weight,
            counters: EvalCounters::default(),
        })
    }

    pub fn set_cost_weight(&mut self, c: f64) -> Result<()> {
        if !(c > 0.0) {
            return Err(Error::Argument("cost weight must be positive".into()));
        }
        self.cost_weight = c;
        Ok(())
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    pub fn likelihood(&self) -> &GaussianLikelihood {
        &self.likelihood
    }

    pub fn model(&self) -> &dyn ForwardModel {
        self.model.as_ref()
    }

    pub fn fd_step(&self) -> f64 {
        self.fd_step
    }

    fn solve_error(theta: &[f64], e: Error) -> Error {
        match e {
            e @ Error::Solve { .. } => e,
            other => Error::Solve {
                theta: theta.to_vec(),
                reason: other.to_string(),
            },
        }
    }

    pub fn log_likelihood(&self, theta: &[f64]) -> Result<f64> {
        self.log_likelihood_in(None, theta)
    }

    fn log_likelihood_in(&self, slot: Option<usize>, theta: &[f64]) -> Result<f64> {
        self.counters.add_forward(1);
        let g = match slot {
            Some(i) => self
                .model
                .evaluate_batch_cached(i, &[theta.to_vec()])
                .map(|mut v| v.remove(0)),
            None => self.model.evaluate(theta),
        }
        .map_err(|e| Self::solve_error(theta, e))?;
        self.likelihood.log_likelihood(&g)
    }

    fn log_density_in(&self, slot: Option<usize>, theta: &[f64]) -> Result<f64> {
        check_dim(self.dim(), theta.len())?;
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Argument("non-finite parameter".into()));
        }
        self.counters.add_density(1);
        let lp = self.prior.log_density(theta)?;
        if lp == f64::NEG_INFINITY {
            return Ok(lp);
        }
        Ok(self.log_likelihood_in(slot, theta)? + lp)
    }

    /// Central differences of the log-likelihood, `2d` forward solves.
    pub fn likelihood_gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.likelihood_gradient_in(None, theta)
    }

    fn likelihood_gradient_in(&self, slot: Option<usize>, theta: &[f64]) -> Result<Vec<f64>> {
        let d = theta.len();
        let h = self.fd_step;
        let mut points = Vec::with_capacity(2 * d);
        for k in 0..d {
            for sign in [1.0, -1.0] {
                let mut p = theta.to_vec();
                p[k] += sign * h;
                points.push(p);
            }
        }
        self.counters.add_forward(2 * d as u64);
        let outputs = match slot {
            Some(i) => self.model.evaluate_batch_cached(i, &points),
            None => self.model.evaluate_batch(&points),
        }
        .map_err(|e| Self::solve_error(theta, e))?;
        let ll = outputs
            .iter()
            .map(|g| self.likelihood.log_likelihood(g))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..d).map(|k| (ll[2 * k] - ll[2 * k + 1]) / (2.0 * h)).collect())
    }
}

impl PosteriorLevel {
    fn score_in(&self, slot: Option<usize>, theta: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), theta.len())?;
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Argument("non-finite parameter".into()));
        }
        if self.prior.support_margin(theta) <= self.fd_step {
            return Err(Error::Solve {
                theta: theta.to_vec(),
                reason: "particle too close to the edge of the prior support".into(),
            });
        }
        self.counters.add_score(1);
        let lg = self.likelihood_gradient_in(slot, theta)?;
        let pg = self.prior.gradient(theta)?;
        Ok(lg.iter().zip(&pg).map(|(a, b)| a + b).collect())
    }
}

impl TargetLevel for PosteriorLevel {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn level(&self) -> usize {
        self.level
    }

    fn cost_weight(&self) -> f64 {
        self.cost_weight
    }

    fn log_density(&self, theta: &[f64]) -> Result<f64> {
        self.log_density_in(None, theta)
    }

    fn log_density_slot(&self, slot: usize, theta: &[f64]) -> Result<f64> {
        self.log_density_in(Some(slot), theta)
    }

    fn score(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.score_in(None, theta)
    }

    fn score_slot(&self, slot: usize, theta: &[f64]) -> Result<Vec<f64>> {
        self.score_in(Some(slot), theta)
    }

    fn begin_run(&self) {
        self.model.clear_cache();
    }

    fn counters(&self) -> &EvalCounters {
        &self.counters
    }

    fn label(&self) -> String {
        format!("posterior level {} ({})", self.level, self.model.label())
    }
}

/// One posterior level per model, sharing prior and data. `models[k]` becomes
/// level `k + 1`.
pub fn make_hierarchy(
    prior: &Prior,
    likelihood: Arc<GaussianLikelihood>,
    models: Vec<Box<dyn ForwardModel>>,
    fd_step: f64,
    cost_weights: &[f64],
) -> Result<Vec<PosteriorLevel>> {
    if models.is_empty() {
        return Err(Error::Config("hierarchy needs at least one level".into()));
    }
    check_dim(models.len(), cost_weights.len())?;
    models
        .into_iter()
        .zip(cost_weights)
        .enumerate()
        .map(|(k, (m, &c))| PosteriorLevel::new(prior.clone(), likelihood.clone(), m, k + 1, fd_step, c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{cholesky, inverse_from_chol};

    /// `G(θ) = A θ`.
    struct Linear {
        a: Vec<f64>,
        rows: usize,
        cols: usize,
    }

    impl ForwardModel for Linear {
        fn parameter_dim(&self) -> usize {
            self.cols
        }
        fn output_dim(&self) -> usize {
            self.rows
        }
        fn evaluate(&self, theta: &[f64]) -> Result<Vec<f64>> {
            Ok((0..self.rows)
                .map(|i| (0..self.cols).map(|j| self.a[i * self.cols + j] * theta[j]).sum())
                .collect())
        }
        fn label(&self) -> String {
            "linear".into()
        }
    }

    fn toy() -> (PosteriorLevel, Vec<f64>, Vec<f64>) {
        let a = vec![1.0, 0.5, -0.3, 2.0, 0.7, 0.7];
        let model = Linear { a: a.clone(), rows: 3, cols: 2 };
        let lik = GaussianLikelihood::new(vec![0.4, -1.0, 0.9], vec![0.1, 0.2, 0.05]).unwrap();
        let prior = Prior::gaussian(vec![0.5, -0.5], vec![2.0, 0.5]).unwrap();
        // Conjugate posterior precision and mean.
        let mut prec = vec![0.0; 4];
        let mut rhs = vec![0.5 / 2.0, -0.5 / 0.5];
        prec[0] = 1.0 / 2.0;
        prec[3] = 1.0 / 0.5;
        for i in 0..3 {
            for j in 0..2 {
                rhs[j] += a[i * 2 + j] * lik.data[i] / lik.noise_var[i];
                for k in 0..2 {
                    prec[j * 2 + k] += a[i * 2 + j] * a[i * 2 + k] / lik.noise_var[i];
                }
            }
        }
        let cov = inverse_from_chol(&cholesky(&prec, 2).unwrap(), 2);
        let mean = vec![cov[0] * rhs[0] + cov[1] * rhs[1], cov[2] * rhs[0] + cov[3] * rhs[1]];
        let level = PosteriorLevel::new(prior, Arc::new(lik), Box::new(model), 1, DEFAULT_FD_STEP, 1.0).unwrap();
        (level, mean, prec)
    }

    #[test]
    fn linear_model_matches_conjugate_posterior() {
        let (level, mean, prec) = toy();
        let quad = |t: &[f64]| {
            let d = [t[0] - mean[0], t[1] - mean[1]];
            -0.5 * (d[0] * (prec[0] * d[0] + prec[1] * d[1]) + d[1] * (prec[2] * d[0] + prec[3] * d[1]))
        };
        let (p, q) = ([0.3, -0.2], [-1.0, 0.8]);
        let diff = level.log_density(&p).unwrap() - level.log_density(&q).unwrap();
        assert!((diff - (quad(&p) - quad(&q))).abs() < 1e-10);
        let s = level.score(&p).unwrap();
        let exact = [
            -(prec[0] * (p[0] - mean[0]) + prec[1] * (p[1] - mean[1])),
            -(prec[2] * (p[0] - mean[0]) + prec[3] * (p[1] - mean[1])),
        ];
        assert!((s[0] - exact[0]).abs() < 1e-6 && (s[1] - exact[1]).abs() < 1e-6);
    }

    #[test]
    fn score_is_the_configured_central_difference() {
        let (level, _, _) = toy();
        let t = [0.2, 0.1];
        let h = level.fd_step();
        let s = level.score(&t).unwrap();
        let pg = level.prior().gradient(&t).unwrap();
        for k in 0..2 {
            let (mut a, mut b) = (t, t);
            a[k] += h;
            b[k] -= h;
            let cd = (level.log_likelihood(&a).unwrap() - level.log_likelihood(&b).unwrap()) / (2.0 * h);
            assert_eq!(s[k], cd + pg[k]);
        }
    }

    #[test]
    fn counters_track_solves() {
        let (level, _, _) = toy();
        level.score(&[0.0, 0.0]).unwrap();
        level.log_density(&[0.0, 0.0]).unwrap();
        let c = level.counters().snapshot();
        assert_eq!((c.score, c.density, c.forward), (1, 1, 5));
    }

    #[test]
    fn flat_likelihood_and_zero_misfit_reduce_to_prior() {
        let prior = Prior::gaussian(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let model = Linear { a: vec![1.0, 0.0, 0.0, 1.0], rows: 2, cols: 2 };
        let t = [0.3, -0.4];
        let exact = Arc::new(GaussianLikelihood::new(t.to_vec(), vec![1.0, 1.0]).unwrap());
        let l = PosteriorLevel::new(prior.clone(), exact, Box::new(model), 1, DEFAULT_FD_STEP, 1.0).unwrap();
        assert_eq!(l.log_density(&t).unwrap(), prior.log_density(&t).unwrap());
        let model = Linear { a: vec![1.0, 0.0, 0.0, 1.0], rows: 2, cols: 2 };
        let flat = Arc::new(GaussianLikelihood::new(vec![5.0, 5.0], vec![1e12, 1e12]).unwrap());
        let l = PosteriorLevel::new(prior.clone(), flat, Box::new(model), 1, DEFAULT_FD_STEP, 1.0).unwrap();
        assert!((l.log_density(&t).unwrap() - prior.log_density(&t).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn log_normal_support_and_gradient() {
        let p = Prior::log_normal(1.0, 0.05, 3).unwrap();
        assert_eq!(p.log_density(&[1.0, -0.1, 2.0]).unwrap(), f64::NEG_INFINITY);
        assert!(p.gradient(&[1.0, 0.0, 2.0]).is_err());
        let t = [2.5, 2.7, 2.9];
        let g = p.gradient(&t).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let (mut a, mut b) = (t, t);
            a[k] += h;
            b[k] -= h;
            let cd = (p.log_density(&a).unwrap() - p.log_density(&b).unwrap()) / (2.0 * h);
            assert!((cd - g[k]).abs() < 1e-5 * g[k].abs().max(1.0));
        }
        // At the median e the density is exp(−1)/(σ√(2π)).
        let one = Prior::log_normal(1.0, 0.05, 1).unwrap();
        assert!((one.log_density(&[1f64.exp()]).unwrap() - (-1.0 - 0.05f64.ln() - 0.5 * LN_2PI)).abs() < 1e-12);
    }

    #[test]
    fn score_refuses_points_at_the_support_edge() {
        let model = Linear { a: vec![1.0], rows: 1, cols: 1 };
        let lik = Arc::new(GaussianLikelihood::new(vec![1.0], vec![1.0]).unwrap());
        let l = PosteriorLevel::new(Prior::log_normal(0.0, 1.0, 1).unwrap(), lik, Box::new(model), 1, DEFAULT_FD_STEP, 1.0).unwrap();
        assert_eq!(l.log_density(&[-1.0]).unwrap(), f64::NEG_INFINITY);
        assert!(matches!(l.score(&[0.01]), Err(Error::Solve { .. })));
        assert!(l.score(&[0.5]).is_ok());
    }

    #[test]
    fn prior_sampling_moments() {
        let mut rng = crate::rng::seeded(3);
        let p = Prior::log_normal(1.0, 0.05, 1).unwrap();
        let n = 20_000;
        let m = (0..n).map(|_| p.sample(&mut rng)[0].ln()).sum::<f64>() / n as f64;
        assert!((m - 1.0).abs() < 4.0 * 0.05 / (n as f64).sqrt());
    }

    #[test]
    fn hierarchy_levels_are_numbered() {
        let prior = Prior::gaussian(vec![0.0], vec![1.0]).unwrap();
        let lik = Arc::new(GaussianLikelihood::new(vec![1.0], vec![1.0]).unwrap());
        let models: Vec<Box<dyn ForwardModel>> = (0..3)
            .map(|_| Box::new(Linear { a: vec![1.0], rows: 1, cols: 1 }) as Box<dyn ForwardModel>)
            .collect();
        let h = make_hierarchy(&prior, lik.clone(), models, DEFAULT_FD_STEP, &[1.0, 2.0, 4.0]).unwrap();
        assert_eq!(h.iter().map(|l| l.level()).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(make_hierarchy(&prior, lik, vec![], DEFAULT_FD_STEP, &[]).is_err());
    }
}
