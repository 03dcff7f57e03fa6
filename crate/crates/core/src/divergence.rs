//! Gaussian test distributions, closed-form and Monte Carlo divergences, and
//! log-linear rate fits for level hierarchies.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ensemble::ParticleEnsemble;
use crate::error::{check_dim, Error, Result};
use crate::linalg::{cholesky, log_det_from_chol, solve_lower, solve_upper_t};
use crate::par;
use crate::rng::{substream, SeededRng};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Multivariate normal with dense SPD covariance (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDist {
    mean: Vec<f64>,
    cov: Vec<f64>,
    chol: Vec<f64>,
}

impl GaussianDist {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::Argument("empty mean".into()));
        }
        check_dim(d * d, cov.len())?;
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (cov[i * d + j], cov[j * d + i]);
                if (a - b).abs() > 1e-12 * (a.abs() + b.abs()).max(f64::MIN_POSITIVE) {
                    return Err(Error::Argument("covariance is not symmetric".into()));
                }
            }
        }
        let chol = cholesky(&cov, d)?;
        Ok(Self { mean, cov, chol })
    }

    pub fn diagonal(mean: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        check_dim(d, variances.len())?;
        let mut cov = vec![0.0; d * d];
        for (i, v) in variances.iter().enumerate() {
            cov[i * d + i] = *v;
        }
        Self::new(mean, cov)
    }

    /// Moment-matched Gaussian of an ensemble (sample mean and covariance).
    pub fn from_ensemble(ensemble: &ParticleEnsemble) -> Result<Self> {
        if ensemble.count() <= ensemble.dim() {
            return Err(Error::Argument(
                "moment matching needs more particles than dimensions".into(),
            ));
        }
        Self::new(ensemble.mean(), ensemble.covariance())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &[f64] {
        &self.cov
    }

    fn log_det(&self) -> f64 {
        log_det_from_chol(&self.chol, self.dim())
    }

    /// `Σ⁻¹ v`.
    fn precision_times(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim();
        solve_upper_t(&self.chol, d, &solve_lower(&self.chol, d, v))
    }

    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        let d = self.dim();
        check_dim(d, x.len())?;
        let diff: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let z = solve_lower(&self.chol, d, &diff);
        let q: f64 = z.iter().map(|v| v * v).sum();
        Ok(-0.5 * (d as f64 * LN_2PI + self.log_det() + q))
    }

    /// `∇ log p(x) = −Σ⁻¹ (x − m)`.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        let diff: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok(self.precision_times(&diff).into_iter().map(|v| -v).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.dim();
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        (0..d)
            .map(|i| self.mean[i] + (0..=i).map(|k| self.chol[i * d + k] * z[k]).sum::<f64>())
            .collect()
    }

    /// `E_self[log q(X)]` in closed form.
    pub fn expected_log_pdf_of(&self, q: &GaussianDist) -> Result<f64> {
        let d = self.dim();
        check_dim(d, q.dim())?;
        let (trace, maha) = trace_and_maha(self, q);
        Ok(-0.5 * (d as f64 * LN_2PI + q.log_det() + trace + maha))
    }
}

/// `tr(Σq⁻¹ Σp)` and `(mp − mq)ᵀ Σq⁻¹ (mp − mq)`.
fn trace_and_maha(p: &GaussianDist, q: &GaussianDist) -> (f64, f64) {
    let d = p.dim();
    let mut trace = 0.0;
    for c in 0..d {
        let col: Vec<f64> = (0..d).map(|r| p.cov[r * d + c]).collect();
        trace += q.precision_times(&col)[c];
    }
    let diff: Vec<f64> = p.mean.iter().zip(&q.mean).map(|(a, b)| a - b).collect();
    let z = solve_lower(&q.chol, d, &diff);
    (trace, z.iter().map(|v| v * v).sum())
}

/// `KL(p ‖ q)` between Gaussians.
pub fn kl_gaussian(p: &GaussianDist, q: &GaussianDist) -> Result<f64> {
    check_dim(p.dim(), q.dim())?;
    let (trace, maha) = trace_and_maha(p, q);
    let kl = 0.5 * (trace + maha - p.dim() as f64 + q.log_det() - p.log_det());
    Ok(kl.max(0.0))
}

/// Hellinger distance with the `½` normalization, so values lie in `[0, 1]`.
pub fn hellinger_gaussian(p: &GaussianDist, q: &GaussianDist) -> Result<f64> {
    let d = p.dim();
    check_dim(d, q.dim())?;
    let avg: Vec<f64> = p.cov.iter().zip(&q.cov).map(|(a, b)| 0.5 * (a + b)).collect();
    let mid = GaussianDist::new(vec![0.0; d], avg)?;
    let diff: Vec<f64> = p.mean.iter().zip(&q.mean).map(|(a, b)| a - b).collect();
    let z = solve_lower(&mid.chol, d, &diff);
    let maha: f64 = z.iter().map(|v| v * v).sum();
    let log_bc = 0.25 * p.log_det() + 0.25 * q.log_det() - 0.5 * mid.log_det() - 0.125 * maha;
    Ok((1.0 - log_bc.exp()).max(0.0).sqrt())
}

/// Mean and standard error of a sample, accumulated over fixed chunks so the
/// result does not depend on the number of workers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub samples: usize,
}

const MC_CHUNKS: usize = 32;

#[derive(Clone, Copy, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn merge(self, o: Moments) -> Moments {
        if self.n == 0.0 {
            return o;
        }
        if o.n == 0.0 {
            return self;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        Moments {
            n,
            mean: self.mean + d * o.n / n,
            m2: self.m2 + o.m2 + d * d * self.n * o.n / n,
        }
    }

    fn variance(&self) -> f64 {
        if self.n > 1.0 {
            self.m2 / (self.n - 1.0)
        } else {
            0.0
        }
    }
}

/// Moments of `f(X)` with `X` drawn by `draw`, over `n` samples split across
/// deterministic substreams of `seed`.
fn mc_moments<D, F>(n: usize, seed: u64, draw: D, f: F) -> Result<Moments>
where
    D: Fn(&mut SeededRng) -> Vec<f64> + Sync + Send,
    F: Fn(&[f64]) -> Result<f64> + Sync + Send,
{
    let chunks = par::try_map_indexed(MC_CHUNKS, |c| {
        let lo = c * n / MC_CHUNKS;
        let hi = (c + 1) * n / MC_CHUNKS;
        let mut rng = substream(seed, c as u64);
        let mut m = Moments::default();
        for _ in lo..hi {
            let x = draw(&mut rng);
            m.push(f(&x)?);
        }
        Ok::<_, Error>(m)
    })?;
    Ok(chunks.into_iter().fold(Moments::default(), Moments::merge))
}

/// Monte Carlo `KL(p ‖ q) ≈ mean log(p/q)` over draws from `p`. Both
/// log-densities must be normalized.
pub fn kl_mc_estimate<P, Q, S>(
    log_p: P,
    log_q: Q,
    sample_p: S,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate>
where
    P: Fn(&[f64]) -> Result<f64> + Sync + Send,
    Q: Fn(&[f64]) -> Result<f64> + Sync + Send,
    S: Fn(&mut SeededRng) -> Vec<f64> + Sync + Send,
{
    if n_samples < 2 {
        return Err(Error::Argument("need at least two samples".into()));
    }
    let m = mc_moments(n_samples, seed, sample_p, |x| Ok(log_p(x)? - log_q(x)?))?;
    Ok(McEstimate {
        estimate: m.mean,
        std_error: (m.variance() / m.n).sqrt(),
        samples: n_samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriangleCheck {
    /// `KL(ρ0‖ρ2) − KL(ρ0‖ρ1) − KL(ρ1‖ρ2)`, closed form.
    pub lhs_minus_rhs: f64,
    /// Closed-form `R = E_ρ0[log ρ1/ρ2] − E_ρ1[log ρ1/ρ2]`.
    pub remainder_exact: f64,
    pub remainder_estimate: f64,
    pub std_error: f64,
}

/// Compares the closed-form defect of the KL triangle with the Monte Carlo
/// remainder `∫ (ρ0 − ρ1) log(ρ1/ρ2)`.
pub fn kl_triangle_remainder(
    rho0: &GaussianDist,
    rho1: &GaussianDist,
    rho2: &GaussianDist,
    n_samples: usize,
    seed: u64,
) -> Result<TriangleCheck> {
    check_dim(rho0.dim(), rho1.dim())?;
    check_dim(rho0.dim(), rho2.dim())?;
    if n_samples < 2 {
        return Err(Error::Argument("need at least two samples".into()));
    }
    let lhs_minus_rhs =
        kl_gaussian(rho0, rho2)? - kl_gaussian(rho0, rho1)? - kl_gaussian(rho1, rho2)?;
    let remainder_exact = rho0.expected_log_pdf_of(rho1)? - rho0.expected_log_pdf_of(rho2)?
        - (rho1.expected_log_pdf_of(rho1)? - rho1.expected_log_pdf_of(rho2)?);
    let log_ratio = |x: &[f64]| Ok(rho1.log_pdf(x)? - rho2.log_pdf(x)?);
    let a = mc_moments(n_samples, seed, |r| rho0.sample(r), log_ratio)?;
    let b = mc_moments(n_samples, seed ^ 0x9e37_79b9_7f4a_7c15, |r| rho1.sample(r), log_ratio)?;
    Ok(TriangleCheck {
        lhs_minus_rhs,
        remainder_exact,
        remainder_estimate: a.mean - b.mean,
        std_error: (a.variance() / a.n + b.variance() / b.n).sqrt(),
    })
}

/// `KL(p ‖ q)` for unnormalized densities from samples of `p`:
/// `mean(a) + log mean(exp(−a))` with `a = log p̃ − log q̃`. The standard
/// error is the delta-method one.
pub fn kl_unnormalized_from_samples(log_p: &[f64], log_q: &[f64]) -> Result<McEstimate> {
    check_dim(log_p.len(), log_q.len())?;
    let n = log_p.len();
    if n < 2 {
        return Err(Error::Argument("need at least two samples".into()));
    }
    let a: Vec<f64> = log_p.iter().zip(log_q).map(|(p, q)| p - q).collect();
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("non-finite log-density among samples".into()));
    }
    let mean_a = a.iter().sum::<f64>() / n as f64;
    let shift = a.iter().map(|v| -v).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = a.iter().map(|v| (-v - shift).exp()).collect();
    let mean_w = w.iter().sum::<f64>() / n as f64;
    let estimate = mean_a + shift + mean_w.ln();
    let mut m = Moments::default();
    for (ai, wi) in a.iter().zip(&w) {
        m.push(ai - wi / mean_w);
    }
    Ok(McEstimate {
        estimate,
        std_error: (m.variance() / n as f64).sqrt(),
        samples: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub residuals: Vec<f64>,
}

/// Ordinary least squares `y ≈ intercept + slope · x`.
pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    check_dim(x.len(), y.len())?;
    let n = x.len() as f64;
    if x.len() < 2 {
        return Err(Error::Argument("need at least two points".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Argument("non-finite data in fit".into()));
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Argument("abscissae are all equal".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - intercept - slope * a).collect();
    let ss_res: f64 = residuals.iter().map(|r| r * r).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
        residuals,
    })
}

/// Per-level data for a rate fit. `kl[k]` is `KL(π^(ℓ) ‖ π)` (or a proxy)
/// at `levels[k]`; `decay` holds `(time, KL)` pairs along one SVGD run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RateInputs {
    pub levels: Vec<usize>,
    pub costs: Vec<f64>,
    pub kl: Vec<f64>,
    pub base: f64,
    pub decay: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFitReport {
    pub base: f64,
    pub gamma: f64,
    pub alpha: f64,
    /// Decay rate of a moment-matched Gaussian surrogate; an approximation.
    pub lambda: Option<f64>,
    pub cost_fit: LinearFit,
    pub kl_fit: LinearFit,
    pub decay_fit: Option<LinearFit>,
}

/// Log-linear fits: `log c_ℓ = log c₀ + γ ℓ log s`,
/// `log KL_ℓ = log k₁ − α ℓ log s`, `log KL(t) = log KL(0) − λ t`.
pub fn fit_rates(inputs: &RateInputs) -> Result<RateFitReport> {
    let n = inputs.levels.len();
    if n < 3 {
        return Err(Error::Argument("rate fits need at least three levels".into()));
    }
    check_dim(n, inputs.costs.len())?;
    check_dim(n, inputs.kl.len())?;
    if !(inputs.base > 1.0) {
        return Err(Error::Argument("base s must exceed 1".into()));
    }
    let positive = |v: &[f64]| v.iter().all(|x| *x > 0.0);
    if !positive(&inputs.costs) || !positive(&inputs.kl) {
        return Err(Error::Argument("costs and KL values must be positive".into()));
    }
    let ln_s = inputs.base.ln();
    let x: Vec<f64> = inputs.levels.iter().map(|&l| l as f64).collect();
    let log = |v: &[f64]| v.iter().map(|a| a.ln()).collect::<Vec<_>>();
    let cost_fit = fit_line(&x, &log(&inputs.costs))?;
    let kl_fit = fit_line(&x, &log(&inputs.kl))?;
    let decay_fit = if inputs.decay.len() >= 2 {
        let (t, k): (Vec<f64>, Vec<f64>) = inputs.decay.iter().copied().unzip();
        if !positive(&k) {
            return Err(Error::Argument("decay KL values must be positive".into()));
        }
        Some(fit_line(&t, &log(&k))?)
    } else {
        None
    };
    Ok(RateFitReport {
        base: inputs.base,
        gamma: cost_fit.slope / ln_s,
        alpha: -kl_fit.slope / ln_s,
        lambda: decay_fit.as_ref().map(|f| -f.slope),
        cost_fit,
        kl_fit,
        decay_fit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> GaussianDist {
        let a: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] = (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum::<f64>();
            }
            cov[i * d + i] += 0.5;
        }
        let mean = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        GaussianDist::new(mean, cov).unwrap()
    }

    #[test]
    fn log_pdf_of_standard_normal() {
        let g = GaussianDist::diagonal(vec![0.0], vec![1.0]).unwrap();
        assert!((g.log_pdf(&[0.0]).unwrap() + 0.5 * LN_2PI).abs() < 1e-15);
        assert_eq!(g.score(&[2.0]).unwrap(), vec![-2.0]);
    }

    #[test]
    fn rejects_bad_covariance() {
        assert!(GaussianDist::new(vec![0.0, 0.0], vec![1.0, 2.0, 2.0, 1.0]).is_err());
        assert!(GaussianDist::new(vec![0.0, 0.0], vec![1.0, 0.1, 0.2, 1.0]).is_err());
        assert!(GaussianDist::diagonal(vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn kl_known_values() {
        let p = GaussianDist::diagonal(vec![1.0], vec![1.0]).unwrap();
        let q = GaussianDist::diagonal(vec![0.0], vec![1.0]).unwrap();
        assert!((kl_gaussian(&p, &q).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(kl_gaussian(&p, &p).unwrap(), 0.0);
        let w = GaussianDist::diagonal(vec![0.0], vec![4.0]).unwrap();
        assert!((kl_gaussian(&q, &w).unwrap() - kl_gaussian(&w, &q).unwrap()).abs() > 0.1);
    }

    #[test]
    fn hellinger_limits() {
        let p = GaussianDist::diagonal(vec![0.0], vec![1.0]).unwrap();
        let far = GaussianDist::diagonal(vec![1e6], vec![1.0]).unwrap();
        assert_eq!(hellinger_gaussian(&p, &p).unwrap(), 0.0);
        assert!((hellinger_gaussian(&p, &far).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hellinger_is_symmetric_and_a_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let d = rng.random_range(1..4);
            let (a, b, c) = (random_spd(&mut rng, d), random_spd(&mut rng, d), random_spd(&mut rng, d));
            let ab = hellinger_gaussian(&a, &b).unwrap();
            assert!((ab - hellinger_gaussian(&b, &a).unwrap()).abs() < 1e-12);
            let ac = hellinger_gaussian(&a, &c).unwrap();
            let cb = hellinger_gaussian(&c, &b).unwrap();
            assert!(ab <= ac + cb + 1e-12);
        }
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_spd(&mut rng, 3);
        let q = random_spd(&mut rng, 3);
        let mc = kl_mc_estimate(|x| p.log_pdf(x), |x| q.log_pdf(x), |r| p.sample(r), 40_000, 9).unwrap();
        let exact = kl_gaussian(&p, &q).unwrap();
        assert!((mc.estimate - exact).abs() <= 3.0 * mc.std_error, "{mc:?} vs {exact}");
    }

    #[test]
    fn mc_self_divergence_is_zero_and_error_scales() {
        let p = GaussianDist::diagonal(vec![0.0], vec![1.0]).unwrap();
        let q = GaussianDist::diagonal(vec![0.3], vec![1.5]).unwrap();
        let same = kl_mc_estimate(|x| p.log_pdf(x), |x| p.log_pdf(x), |r| p.sample(r), 1000, 1).unwrap();
        assert_eq!(same.estimate, 0.0);
        let a = kl_mc_estimate(|x| p.log_pdf(x), |x| q.log_pdf(x), |r| p.sample(r), 20_000, 2).unwrap();
        let b = kl_mc_estimate(|x| p.log_pdf(x), |x| q.log_pdf(x), |r| p.sample(r), 40_000, 2).unwrap();
        let ratio = b.std_error / a.std_error;
        assert!((ratio - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn mc_estimate_independent_of_workers() {
        let p = GaussianDist::diagonal(vec![0.0, 1.0], vec![1.0, 2.0]).unwrap();
        let q = GaussianDist::diagonal(vec![0.5, 0.0], vec![1.0, 1.0]).unwrap();
        let run = || kl_mc_estimate(|x| p.log_pdf(x), |x| q.log_pdf(x), |r| p.sample(r), 5000, 3).unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn triangle_degenerate_cases() {
        let a = GaussianDist::diagonal(vec![0.0], vec![1.0]).unwrap();
        let b = GaussianDist::diagonal(vec![1.0], vec![2.0]).unwrap();
        let t = kl_triangle_remainder(&a, &a, &b, 1000, 4).unwrap();
        assert!(t.lhs_minus_rhs.abs() < 1e-14);
        assert!(t.remainder_exact.abs() < 1e-14);
        let t = kl_triangle_remainder(&a, &b, &b, 1000, 4).unwrap();
        assert_eq!(t.remainder_estimate, 0.0);
        assert!(t.lhs_minus_rhs.abs() < 1e-14);
    }

    #[test]
    fn triangle_closed_forms_agree_in_several_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for d in [1, 2, 4] {
            let (a, b, c) = (random_spd(&mut rng, d), random_spd(&mut rng, d), random_spd(&mut rng, d));
            let t = kl_triangle_remainder(&a, &b, &c, 100, 1).unwrap();
            assert!((t.lhs_minus_rhs - t.remainder_exact).abs() < 1e-10 * (1.0 + t.lhs_minus_rhs.abs()));
        }
    }

    #[test]
    fn unnormalized_kl_matches_closed_form() {
        let p = GaussianDist::diagonal(vec![0.0], vec![1.0]).unwrap();
        let q = GaussianDist::diagonal(vec![0.4], vec![1.3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let xs: Vec<Vec<f64>> = (0..50_000).map(|_| p.sample(&mut rng)).collect();
        // Arbitrary normalizing constants must cancel.
        let lp: Vec<f64> = xs.iter().map(|x| p.log_pdf(x).unwrap() + 3.0).collect();
        let lq: Vec<f64> = xs.iter().map(|x| q.log_pdf(x).unwrap() - 7.0).collect();
        let est = kl_unnormalized_from_samples(&lp, &lq).unwrap();
        let exact = kl_gaussian(&p, &q).unwrap();
        assert!((est.estimate - exact).abs() <= 3.0 * est.std_error, "{est:?} vs {exact}");
    }

    #[test]
    fn planted_rates_are_recovered() {
        let levels: Vec<usize> = (1..=6).collect();
        let inputs = RateInputs {
            costs: levels.iter().map(|&l| 4f64.powi(l as i32)).collect(),
            kl: levels.iter().map(|&l| 2f64.powi(-2 * l as i32)).collect(),
            levels,
            base: 2.0,
            decay: (0..10).map(|k| (k as f64 * 0.1, 0.5 * (-3.0 * k as f64 * 0.1).exp())).collect(),
        };
        let r = fit_rates(&inputs).unwrap();
        assert!((r.gamma - 2.0).abs() < 1e-12);
        assert!((r.alpha - 2.0).abs() < 1e-12);
        assert!((r.lambda.unwrap() - 3.0).abs() < 1e-12);
        assert!(r.kl_fit.residuals.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn rate_fit_needs_three_levels() {
        let inputs = RateInputs {
            levels: vec![1, 2],
            costs: vec![1.0, 2.0],
            kl: vec![1.0, 0.5],
            base: 2.0,
            decay: vec![],
        };
        assert!(matches!(fit_rates(&inputs), Err(Error::Argument(_))));
    }

    proptest::proptest! {
        #[test]
        fn hellinger_bounded_by_kl(seed in 0u64..10_000, d in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_spd(&mut rng, d);
            let q = random_spd(&mut rng, d);
            let h = hellinger_gaussian(&p, &q).unwrap();
            proptest::prop_assert!(2.0 * h * h <= kl_gaussian(&p, &q).unwrap() + 1e-12);
            proptest::prop_assert!((0.0..=1.0).contains(&h));
        }
    }
}
