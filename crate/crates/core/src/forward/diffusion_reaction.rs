//! Nonlinear diffusion-reaction model on the unit square.
//!
//! `-Δu + g(u, θ) = 100 sin(2πx₁) sin(2πx₂)` with homogeneous Dirichlet data,
//! discretized with the 5-point Laplacian and solved by Newton's method with
//! Armijo backtracking on `½‖F‖²`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use std::collections::HashMap;
use std::sync::Mutex;

use super::banded::{BandLu, BandMatrix};
use super::ForwardModel;
use crate::error::{check_dim, Error, Result};

/// Observation sites `(0.25 i, 0.2 j)`, `i = 1..=3`, `j = 1..=4`, i-major.
pub fn observation_points() -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(12);
    for i in 1..=3 {
        for j in 1..=4 {
            pts.push((0.25 * i as f64, 0.2 * j as f64));
        }
    }
    pts
}

/// Largest exponent accepted inside the reaction before reporting overflow.
const EXP_LIMIT: f64 = 700.0;

/// Reaction term `g(u, θ) = (0.1 sin θ₁ + 2) exp(-2.7 θ₁²) (exp(1.8 θ₂ u) - 1)`
/// and its derivative in `u`.
pub fn reaction(u: f64, theta: [f64; 2]) -> Result<(f64, f64)> {
    let arg = 1.8 * theta[1] * u;
    if !arg.is_finite() || arg > EXP_LIMIT {
        return Err(Error::Solve {
            theta: theta.to_vec(),
            reason: format!("reaction overflow at u = {u}"),
        });
    }
    let amp = (0.1 * theta[0].sin() + 2.0) * (-2.7 * theta[0] * theta[0]).exp();
    let e = arg.exp();
    Ok((amp * arg.exp_m1(), amp * 1.8 * theta[1] * e))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reaction {
    Nonlinear([f64; 2]),
    /// `g ≡ 0`; the problem reduces to a Poisson solve.
    Disabled,
}

impl Reaction {
    #[inline]
    fn eval(&self, u: f64) -> (f64, f64) {
        match *self {
            Reaction::Disabled => (0.0, 0.0),
            Reaction::Nonlinear(theta) => match reaction(u, theta) {
                Ok(v) => v,
                Err(_) => (f64::INFINITY, f64::INFINITY),
            },
        }
    }

    fn theta(&self) -> Vec<f64> {
        match self {
            Reaction::Nonlinear(t) => t.to_vec(),
            Reaction::Disabled => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub armijo: f64,
    pub backtrack: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 50,
            armijo: 1e-4,
            backtrack: 0.5,
        }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return Err(Error::Argument("newton tolerance and iteration cap must be positive".into()));
        }
        if !unit(self.armijo) || !unit(self.backtrack) {
            return Err(Error::Argument("armijo constant and backtracking factor must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Uniform grid with mesh width `h = 2^(-level-2)`.
#[derive(Debug, Clone)]
pub struct DrGrid {
    pub level: u32,
    pub h: f64,
    /// Interior nodes per side, `1/h - 1`.
    pub m: usize,
    forcing: Vec<f64>,
}

impl DrGrid {
    pub fn new(level: u32) -> Result<Self> {
        if level == 0 || level > 12 {
            return Err(Error::Argument(format!("diffusion-reaction level {level} out of range 1..=12")));
        }
        let cells = 1usize << (level + 2);
        let h = 1.0 / cells as f64;
        let m = cells - 1;
        let mut forcing = Vec::with_capacity(m * m);
        for a in 1..=m {
            for b in 1..=m {
                let (x1, x2) = (a as f64 * h, b as f64 * h);
                forcing.push(100.0 * (2.0 * PI * x1).sin() * (2.0 * PI * x2).sin());
            }
        }
        Ok(Self { level, h, m, forcing })
    }

    pub fn unknowns(&self) -> usize {
        self.m * self.m
    }

    pub fn forcing(&self) -> &[f64] {
        &self.forcing
    }

    /// Residual `F(u) = A u + g(u) - f` of the discrete system.
    pub fn residual(&self, u: &[f64], reaction: Reaction) -> Vec<f64> {
        let m = self.m;
        let inv_h2 = 1.0 / (self.h * self.h);
        let mut r = vec![0.0; m * m];
        for a in 0..m {
            for b in 0..m {
                let k = a * m + b;
                let mut lap = 4.0 * u[k];
                if a > 0 {
                    lap -= u[k - m];
                }
                if a + 1 < m {
                    lap -= u[k + m];
                }
                if b > 0 {
                    lap -= u[k - 1];
                }
                if b + 1 < m {
                    lap -= u[k + 1];
                }
                r[k] = lap * inv_h2 + reaction.eval(u[k]).0 - self.forcing[k];
            }
        }
        r
    }

    fn jacobian(&self, u: &[f64], reaction: Reaction) -> (BandMatrix, bool) {
        let m = self.m;
        let inv_h2 = 1.0 / (self.h * self.h);
        let mut jac = BandMatrix::zeros(m * m, m, m);
        let mut monotone = true;
        for a in 0..m {
            for b in 0..m {
                let k = a * m + b;
                let dg = reaction.eval(u[k]).1;
                monotone &= dg >= 0.0;
                jac.set(k, k, 4.0 * inv_h2 + dg);
                if a > 0 {
                    jac.set(k, k - m, -inv_h2);
                }
                if a + 1 < m {
                    jac.set(k, k + m, -inv_h2);
                }
                if b > 0 {
                    jac.set(k, k - 1, -inv_h2);
                }
                if b + 1 < m {
                    jac.set(k, k + 1, -inv_h2);
                }
            }
        }
        (jac, monotone)
    }
}

/// Converged interior field plus Newton diagnostics.
#[derive(Debug, Clone)]
pub struct DrSolution {
    pub m: usize,
    pub h: f64,
    /// Interior values, index `a * m + b` for node `((a+1) h, (b+1) h)`.
    pub interior: Vec<f64>,
    pub iterations: usize,
    pub residual_inf: f64,
    /// `‖F‖₂` after every accepted step, starting with the initial guess.
    pub residual_history: Vec<f64>,
}

impl DrSolution {
    /// Field on all `(m+2)²` nodes including the zero boundary, row `p` ↔ `x₁ = p h`.
    pub fn full_field(&self) -> Vec<f64> {
        let n = self.m + 2;
        let mut full = vec![0.0; n * n];
        for a in 0..self.m {
            for b in 0..self.m {
                full[(a + 1) * n + b + 1] = self.interior[a * self.m + b];
            }
        }
        full
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solves the discrete system for a given reaction, optionally from a warm start.
pub fn solve_with(
    grid: &DrGrid,
    reaction: Reaction,
    cfg: &NewtonConfig,
    initial: Option<&[f64]>,
) -> Result<DrSolution> {
    Ok(newton(grid, reaction, cfg, initial)?.0)
}

/// LU of the Jacobian at `u`; pivoting only when the reaction is not
/// monotone or the unpivoted elimination breaks down.
fn factor_jacobian(grid: &DrGrid, u: &[f64], reaction: Reaction) -> Result<BandLu> {
    let (jac, monotone) = grid.jacobian(u, reaction);
    match jac.clone().factor(!monotone) {
        Ok(lu) => Ok(lu),
        Err(_) if monotone => jac.factor(true),
        Err(e) => Err(e),
    }
}

/// Damped Newton; also returns the last Jacobian factorization, if any.
fn newton(
    grid: &DrGrid,
    reaction: Reaction,
    cfg: &NewtonConfig,
    initial: Option<&[f64]>,
) -> Result<(DrSolution, Option<BandLu>)> {
    cfg.validate()?;
    let n = grid.unknowns();
    let mut u = match initial {
        Some(u0) => {
            check_dim(n, u0.len())?;
            u0.to_vec()
        }
        None => vec![0.0; n],
    };
    let mut r = grid.residual(&u, reaction);
    let mut r2 = norm2(&r);
    if !r2.is_finite() {
        // A warm start can sit outside the region where the reaction is finite.
        u = vec![0.0; n];
        r = grid.residual(&u, reaction);
        r2 = norm2(&r);
    }
    let mut history = vec![r2];
    let mut last_lu: Option<BandLu> = None;
    let fail = |reason: String| Error::Solve {
        theta: reaction.theta(),
        reason,
    };
    for it in 0..=cfg.max_iterations {
        let rinf = norm_inf(&r);
        if rinf <= cfg.tolerance {
            let sol = DrSolution {
                m: grid.m,
                h: grid.h,
                interior: u,
                iterations: it,
                residual_inf: rinf,
                residual_history: history,
            };
            return Ok((sol, last_lu));
        }
        if it == cfg.max_iterations {
            return Err(Error::NewtonDivergence {
                residual: rinf,
                iterations: it,
            });
        }
        let lu = factor_jacobian(grid, &u, reaction).map_err(|e| fail(e.to_string()))?;
        let mut step = r.clone();
        lu.solve_in_place(&mut step);
        last_lu = Some(lu);
        let mut t = 1.0;
        let phi = r2 * r2;
        loop {
            let trial: Vec<f64> = u.iter().zip(&step).map(|(ui, si)| ui - t * si).collect();
            let rt = grid.residual(&trial, reaction);
            let rt2 = norm2(&rt);
            if rt2.is_finite() && rt2 * rt2 <= (1.0 - 2.0 * cfg.armijo * t) * phi {
                u = trial;
                r = rt;
                r2 = rt2;
                history.push(r2);
                break;
            }
            t *= cfg.backtrack;
            if t < 1e-12 {
                // Rounding floor: no further decrease is representable.
                if rinf <= 1e3 * cfg.tolerance {
                    return Err(Error::NewtonDivergence {
                        residual: rinf,
                        iterations: it,
                    });
                }
                return Err(fail(format!("line search stalled at residual {rinf:e}")));
            }
        }
    }
    unreachable!()
}

/// Chord iteration with a frozen factorization from a nearby state. Returns
/// `None` if the residual stops contracting, so the caller can fall back to
/// full Newton.
fn chord(
    grid: &DrGrid,
    reaction: Reaction,
    cfg: &NewtonConfig,
    start: &[f64],
    lu: &BandLu,
) -> Option<DrSolution> {
    const MAX_CHORD: usize = 20;
    let mut u = start.to_vec();
    let mut r = grid.residual(&u, reaction);
    let mut r2 = norm2(&r);
    let mut history = vec![r2];
    for it in 0..=MAX_CHORD {
        let rinf = norm_inf(&r);
        if !rinf.is_finite() {
            return None;
        }
        if rinf <= cfg.tolerance {
            return Some(DrSolution {
                m: grid.m,
                h: grid.h,
                interior: u,
                iterations: it,
                residual_inf: rinf,
                residual_history: history,
            });
        }
        if it == MAX_CHORD {
            return None;
        }
        let mut step = r.clone();
        lu.solve_in_place(&mut step);
        u.iter_mut().zip(&step).for_each(|(ui, si)| *ui -= si);
        r = grid.residual(&u, reaction);
        let next = norm2(&r);
        if !(next < 0.3 * r2) {
            return None;
        }
        r2 = next;
        history.push(r2);
    }
    None
}

pub fn solve_dr(grid: &DrGrid, theta: [f64; 2], cfg: &NewtonConfig) -> Result<DrSolution> {
    solve_with(grid, Reaction::Nonlinear(theta), cfg, None)
}

/// Bilinear interpolation of a full nodal field at the 12 observation sites.
pub fn observe_dr(full_field: &[f64], grid: &DrGrid) -> Vec<f64> {
    let n = grid.m + 2;
    assert_eq!(full_field.len(), n * n, "full field must include boundary nodes");
    observation_points()
        .into_iter()
        .map(|(x1, x2)| bilinear(full_field, n, grid.h, x1, x2))
        .collect()
}

fn bilinear(field: &[f64], n: usize, h: f64, x1: f64, x2: f64) -> f64 {
    let locate = |x: f64| {
        let s = x / h;
        let p = (s.floor() as usize).min(n - 2);
        (p, s - p as f64)
    };
    let (p, s) = locate(x1);
    let (q, t) = locate(x2);
    let f = |a: usize, b: usize| field[a * n + b];
    (1.0 - s) * (1.0 - t) * f(p, q)
        + s * (1.0 - t) * f(p + 1, q)
        + (1.0 - s) * t * f(p, q + 1)
        + s * t * f(p + 1, q + 1)
}

/// Parameter-to-observable map on one grid level.
#[derive(Debug)]
pub struct DiffusionReactionModel {
    grid: DrGrid,
    newton: NewtonConfig,
    /// Per-caller solver state, reused as warm starts.
    slots: Mutex<HashMap<usize, SlotState>>,
}

impl DiffusionReactionModel {
    pub fn new(level: u32, newton: NewtonConfig) -> Result<Self> {
        newton.validate()?;
        Ok(Self {
            grid: DrGrid::new(level)?,
            newton,
            slots: Mutex::new(HashMap::new()),
        })
    }

    pub fn grid(&self) -> &DrGrid {
        &self.grid
    }

    pub fn solve(&self, theta: &[f64], warm: Option<&[f64]>) -> Result<DrSolution> {
        check_dim(2, theta.len())?;
        let reaction = Reaction::Nonlinear([theta[0], theta[1]]);
        solve_with(&self.grid, reaction, &self.newton, warm).map_err(|e| match e {
            Error::Solve { .. } => e,
            other => Error::Solve {
                theta: theta.to_vec(),
                reason: other.to_string(),
            },
        })
    }
}

/// Chord iteration count above which the stored factorization is refreshed.
const STALE_CHORD: usize = 5;

/// Solver state kept between calls for one caller slot: the last field at
/// every stencil point and a Jacobian factorization for chord steps.
#[derive(Debug, Default)]
struct SlotState {
    lu: Option<BandLu>,
    fields: Vec<Vec<f64>>,
}

impl DiffusionReactionModel {
    /// Solves a stencil of nearby parameters. Each point first tries chord
    /// iterations with the stored factorization from its previous field (or
    /// the neighbouring point's field); on failure it runs damped Newton and
    /// refreshes the factorization.
    fn solve_stencil(&self, thetas: &[Vec<f64>], state: &mut SlotState) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(thetas.len());
        let mut stale = false;
        for (k, theta) in thetas.iter().enumerate() {
            check_dim(2, theta.len())?;
            let reaction = Reaction::Nonlinear([theta[0], theta[1]]);
            let start = state.fields.get(k).or_else(|| k.checked_sub(1).and_then(|j| state.fields.get(j)));
            let chorded = match (&state.lu, start) {
                (Some(lu), Some(u0)) => chord(&self.grid, reaction, &self.newton, u0, lu),
                _ => None,
            };
            let sol = match chorded {
                Some(sol) => {
                    stale |= sol.iterations > STALE_CHORD;
                    sol
                }
                None => {
                    let (sol, lu) = newton(&self.grid, reaction, &self.newton, start.map(|v| v.as_slice()))
                        .map_err(|e| match e {
                            Error::Solve { .. } => e,
                            other => Error::Solve {
                                theta: theta.clone(),
                                reason: other.to_string(),
                            },
                        })?;
                    state.lu = match lu {
                        Some(lu) => Some(lu),
                        // Converged on the warm start itself.
                        None => factor_jacobian(&self.grid, &sol.interior, reaction).ok(),
                    };
                    sol
                }
            };
            out.push(observe_dr(&sol.full_field(), &self.grid));
            if k < state.fields.len() {
                state.fields[k] = sol.interior;
            } else {
                state.fields.push(sol.interior);
            }
        }
        if stale {
            let t = &thetas[0];
            state.lu = factor_jacobian(&self.grid, &state.fields[0], Reaction::Nonlinear([t[0], t[1]])).ok();
        }
        Ok(out)
    }
}

impl ForwardModel for DiffusionReactionModel {
    fn parameter_dim(&self) -> usize {
        2
    }

    fn output_dim(&self) -> usize {
        12
    }

    fn evaluate(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let sol = self.solve(theta, None)?;
        Ok(observe_dr(&sol.full_field(), &self.grid))
    }

    fn evaluate_batch(&self, thetas: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.solve_stencil(thetas, &mut SlotState::default())
    }

    fn evaluate_batch_cached(&self, slot: usize, thetas: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut state = self.slots.lock().expect("slot cache").remove(&slot).unwrap_or_default();
        let out = self.solve_stencil(thetas, &mut state);
        self.slots.lock().expect("slot cache").insert(slot, state);
        out
    }

    fn clear_cache(&self) {
        self.slots.lock().expect("slot cache").clear();
    }

    fn label(&self) -> String {
        format!("diffusion-reaction h=2^-{}", self.grid.level + 2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const THETA_STAR: [f64; 2] = [-PI / 4.0, 3.0];

    #[test]
    fn reaction_vanishes_at_zero_state_or_zero_rate() {
        for theta in [[0.3, 2.0], [-1.0, -4.0], THETA_STAR] {
            assert_eq!(reaction(0.0, theta).unwrap().0, 0.0);
        }
        for u in [-2.0, 0.5, 3.0] {
            assert_eq!(reaction(u, [0.7, 0.0]).unwrap().0, 0.0);
        }
    }

    #[test]
    fn reaction_matches_direct_evaluation() {
        // Independent evaluation of the closed form, derivative by hand.
        let (t1, t2, u) = (-PI / 4.0, 3.0, 0.1_f64);
        let amp = (0.1 * t1.sin() + 2.0) * (-2.7 * t1 * t1).exp();
        let expected = amp * ((1.8 * t2 * u).exp() - 1.0);
        let (g, dg) = reaction(u, [t1, t2]).unwrap();
        assert!((g - expected).abs() <= 1e-15 * expected.abs().max(1.0));
        assert!((g - 0.261_215_494_578_642).abs() < 1e-11, "g = {g:.16}");
        let fd = (reaction(u + 1e-6, [t1, t2]).unwrap().0 - reaction(u - 1e-6, [t1, t2]).unwrap().0) / 2e-6;
        assert!((dg - fd).abs() < 1e-7 * dg.abs());
    }

    #[test]
    fn reaction_overflow_is_reported() {
        assert!(matches!(reaction(1000.0, [0.0, 3.0]), Err(Error::Solve { .. })));
    }

    #[test]
    fn grid_sizes_follow_level() {
        let g = DrGrid::new(3).unwrap();
        assert_eq!(g.h, 1.0 / 32.0);
        assert_eq!(g.m, 31);
        assert!(DrGrid::new(0).is_err());
    }

    #[test]
    fn constant_and_linear_fields_interpolate_exactly() {
        let grid = DrGrid::new(2).unwrap();
        let n = grid.m + 2;
        let ones = vec![1.0; n * n];
        assert!(observe_dr(&ones, &grid).iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let mut lin = vec![0.0; n * n];
        for p in 0..n {
            for q in 0..n {
                lin[p * n + q] = p as f64 * grid.h;
            }
        }
        let obs = observe_dr(&lin, &grid);
        for (k, v) in obs.iter().enumerate() {
            let i = k / 4 + 1;
            assert!((v - 0.25 * i as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_rate_matches_disabled_reaction() {
        let grid = DrGrid::new(2).unwrap();
        let cfg = NewtonConfig::default();
        let a = solve_with(&grid, Reaction::Nonlinear([0.4, 0.0]), &cfg, None).unwrap();
        let b = solve_with(&grid, Reaction::Disabled, &cfg, None).unwrap();
        for (x, y) in a.interior.iter().zip(&b.interior) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn poisson_field_is_swap_symmetric() {
        let grid = DrGrid::new(2).unwrap();
        let sol = solve_with(&grid, Reaction::Disabled, &NewtonConfig::default(), None).unwrap();
        let m = grid.m;
        for a in 0..m {
            for b in 0..m {
                assert!((sol.interior[a * m + b] - sol.interior[b * m + a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn newton_converges_at_true_parameter_with_certificate() {
        let grid = DrGrid::new(3).unwrap();
        let cfg = NewtonConfig::default();
        let sol = solve_dr(&grid, THETA_STAR, &cfg).unwrap();
        assert!(sol.iterations <= 25, "iterations = {}", sol.iterations);
        let r = grid.residual(&sol.interior, Reaction::Nonlinear(THETA_STAR));
        assert!(norm_inf(&r) <= cfg.tolerance);
        for w in sol.residual_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn warm_start_reaches_same_solution() {
        let model = DiffusionReactionModel::new(2, NewtonConfig::default()).unwrap();
        let cold = model.evaluate(&[0.8, 2.9]).unwrap();
        let batch = model
            .evaluate_batch(&[vec![0.8, 3.0], vec![0.8, 2.9]])
            .unwrap();
        for (a, b) in cold.iter().zip(&batch[1]) {
            assert!((a - b).abs() < 1e-11);
        }
    }
}
