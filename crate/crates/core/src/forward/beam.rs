//! Euler-Bernoulli cantilever `(E u'')'' = f` on `(0, 1)`.
//!
//! Clamped at `x = 0` (`u = u' = 0`), free at `x = 1` (`E u'' = 0`,
//! `(E u'')' = 0`). The fourth-order operator is discretized as a second
//! difference of the nodal moments `M = E u''`, with ghost nodes for the
//! boundary conditions, which keeps the system pentadiagonal.

use serde::{Deserialize, Serialize};

use super::banded::BandMatrix;
use super::ForwardModel;
use crate::error::{Error, Result};

pub const SMOOTHING_WIDTH: f64 = 0.005;

/// Number of displacement observations, equidistant on `[0, 1]` including both ends.
pub const OBSERVATIONS: usize = 41;

/// Logistic step from 0 to 1 centred at `alpha`.
pub fn logistic_step(x: f64, alpha: f64, width: f64) -> f64 {
    1.0 / (1.0 + (-(x - alpha) / width).exp())
}

/// Piecewise-constant stiffness on `d` equal segments, smoothed by logistic steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StiffnessField {
    pub theta: Vec<f64>,
    pub width: f64,
}

impl StiffnessField {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::Argument("stiffness needs at least one parameter".into()));
        }
        if let Some(v) = theta.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::Argument(format!("stiffness parameters must be positive, got {v}")));
        }
        Ok(Self {
            theta,
            width: SMOOTHING_WIDTH,
        })
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// Knots `α_1, …, α_{d+1}` equidistant on `[0, 1]`.
    pub fn knots(&self) -> Vec<f64> {
        let d = self.dim();
        (0..=d).map(|i| i as f64 / d as f64).collect()
    }

    /// `Ê(x) = θ₁ + Σ_{i=2}^{d} (θ_i − θ_{i−1}) I(x, α_i)`.
    pub fn smooth(&self, x: f64) -> f64 {
        let d = self.dim();
        let mut e = self.theta[0];
        for i in 1..d {
            let alpha = i as f64 / d as f64;
            e += (self.theta[i] - self.theta[i - 1]) * logistic_step(x, alpha, self.width);
        }
        e
    }

    /// The unsmoothed step function `Σ θ_i 1(α_i, α_{i+1}]` (with `θ₁` at `x = 0`).
    pub fn piecewise(&self, x: f64) -> f64 {
        let d = self.dim();
        let seg = ((x * d as f64).ceil() as usize).clamp(1, d);
        self.theta[seg - 1]
    }
}

/// `smooth_stiffness` in free-function form.
pub fn smooth_stiffness(field: &StiffnessField, x: f64) -> f64 {
    field.smooth(x)
}

#[derive(Debug, Clone)]
pub struct BeamGrid {
    pub level: u32,
    pub nodes: usize,
    pub h: f64,
    pub load: Vec<f64>,
}

impl BeamGrid {
    /// Nodes 51, 101, 201, 301, ... (`100(ℓ-1) + 1` from level 2 on), unit load.
    pub fn new(level: u32) -> Result<Self> {
        if level == 0 {
            return Err(Error::Argument("beam levels start at 1".into()));
        }
        let nodes = if level == 1 { 51 } else { 100 * (level as usize - 1) + 1 };
        Self::with_nodes(nodes, level)
    }

    pub fn with_nodes(nodes: usize, level: u32) -> Result<Self> {
        if nodes < 5 {
            return Err(Error::Argument(format!("beam grid needs at least 5 nodes, got {nodes}")));
        }
        Ok(Self {
            level,
            nodes,
            h: 1.0 / (nodes - 1) as f64,
            load: vec![1.0; nodes],
        })
    }

    pub fn x(&self, k: usize) -> f64 {
        k as f64 * self.h
    }
}

/// Solves for the nodal displacement (all `nodes` values, `u[0] = 0`) given
/// nodal stiffness values.
pub fn solve_beam_nodal(grid: &BeamGrid, stiffness: &[f64]) -> Result<Vec<f64>> {
    let n = grid.nodes;
    assert_eq!(stiffness.len(), n);
    if let Some((k, e)) = stiffness.iter().enumerate().find(|(_, e)| !(**e > 0.0)) {
        return Err(Error::Singular(format!("nonpositive stiffness {e} at node {k}")));
    }
    let inv_h2 = 1.0 / (grid.h * grid.h);
    // Moment M_j as coefficients on unknowns u_1..u_{n-1} (column j-1).
    let moment = |j: usize| -> Vec<(usize, f64)> {
        let e = stiffness[j] * inv_h2;
        if j == 0 {
            // u_{-1} = u_1 from u'(0) = 0, u_0 = 0.
            vec![(1, 2.0 * e)]
        } else if j == n - 1 {
            Vec::new()
        } else {
            let mut c = Vec::with_capacity(3);
            if j > 1 {
                c.push((j - 1, e));
            }
            c.push((j, -2.0 * e));
            c.push((j + 1, e));
            c
        }
    };
    let dim = n - 1;
    let mut a = BandMatrix::zeros(dim, 2, 2);
    let mut rhs = vec![0.0; dim];
    for k in 1..n {
        let row = k - 1;
        let terms: Vec<(usize, f64)> = if k == n - 1 {
            // Shear-free ghost M_n = M_{n-2}, moment-free M_{n-1} = 0.
            vec![(n - 2, 2.0)]
        } else {
            vec![(k - 1, 1.0), (k, -2.0), (k + 1, 1.0)]
        };
        for (j, w) in terms {
            for (node, c) in moment(j) {
                a.add(row, node - 1, w * c * inv_h2);
            }
        }
        rhs[row] = grid.load[k];
    }
    let lu = a.factor(true)?;
    lu.solve_in_place(&mut rhs);
    let mut u = Vec::with_capacity(n);
    u.push(0.0);
    u.extend(rhs);
    Ok(u)
}

/// Displacement with the smoothed stiffness sampled at the grid nodes.
pub fn solve_beam(grid: &BeamGrid, field: &StiffnessField) -> Result<Vec<f64>> {
    let e: Vec<f64> = (0..grid.nodes).map(|k| field.smooth(grid.x(k))).collect();
    solve_beam_nodal(grid, &e)
}

/// Linear interpolation of a nodal field at `x_j = j/40`, `j = 0..=40`.
pub fn observe_beam(field: &[f64], grid: &BeamGrid) -> Vec<f64> {
    assert_eq!(field.len(), grid.nodes);
    (0..OBSERVATIONS)
        .map(|j| {
            let x = j as f64 / (OBSERVATIONS - 1) as f64;
            let s = x / grid.h;
            let k = (s.floor() as usize).min(grid.nodes - 2);
            let t = s - k as f64;
            (1.0 - t) * field[k] + t * field[k + 1]
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BeamModel {
    grid: BeamGrid,
    dim: usize,
}

impl BeamModel {
    pub fn new(level: u32, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Argument("beam parameter dimension must be positive".into()));
        }
        Ok(Self {
            grid: BeamGrid::new(level)?,
            dim,
        })
    }

    pub fn grid(&self) -> &BeamGrid {
        &self.grid
    }
}

impl ForwardModel for BeamModel {
    fn parameter_dim(&self) -> usize {
        self.dim
    }

    fn output_dim(&self) -> usize {
        OBSERVATIONS
    }

    fn evaluate(&self, theta: &[f64]) -> Result<Vec<f64>> {
        crate::error::check_dim(self.dim, theta.len())?;
        let solve = || -> Result<Vec<f64>> {
            let field = StiffnessField::new(theta.to_vec())?;
            let u = solve_beam(&self.grid, &field)?;
            Ok(observe_beam(&u, &self.grid))
        };
        solve().map_err(|e| Error::Solve {
            theta: theta.to_vec(),
            reason: e.to_string(),
        })
    }

    fn label(&self) -> String {
        format!("beam {} nodes, d={}", self.grid.nodes, self.dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cantilever(x: f64, q: f64, e0: f64) -> f64 {
        q * x * x * (6.0 - 4.0 * x + x * x) / (24.0 * e0)
    }

    #[test]
    fn equal_parameters_give_constant_stiffness() {
        let f = StiffnessField::new(vec![2.5; 7]).unwrap();
        for k in 0..=100 {
            assert_eq!(f.smooth(k as f64 / 100.0), 2.5);
        }
    }

    #[test]
    fn stiffness_saturates_inside_segments() {
        let f = StiffnessField::new(vec![1.0, 2.0, 0.5, 3.0]).unwrap();
        for (i, th) in f.theta.iter().enumerate() {
            let mid = (i as f64 + 0.5) / 4.0;
            assert!((f.smooth(mid) - th).abs() <= 1e-8);
        }
    }

    #[test]
    fn stiffness_matches_sum_of_sigmoids() {
        let f = StiffnessField::new(vec![1.0, 2.0, 0.5]).unwrap();
        for k in 0..=300 {
            let x = k as f64 / 300.0;
            let i2 = 1.0 / (1.0 + (-(x - 1.0 / 3.0) / 0.005).exp());
            let i3 = 1.0 / (1.0 + (-(x - 2.0 / 3.0) / 0.005).exp());
            let direct = 1.0 + (2.0 - 1.0) * i2 + (0.5 - 2.0) * i3;
            assert!((f.smooth(x) - direct).abs() < 1e-14);
            let e = f.smooth(x);
            assert!((0.5..=2.0).contains(&e));
        }
    }

    #[test]
    fn piecewise_assigns_half_open_segments() {
        let f = StiffnessField::new(vec![1.0, 2.0]).unwrap();
        assert_eq!(f.piecewise(0.0), 1.0);
        assert_eq!(f.piecewise(0.5), 1.0);
        assert_eq!(f.piecewise(0.5000001), 2.0);
        assert_eq!(f.piecewise(1.0), 2.0);
    }

    #[test]
    fn nonpositive_parameters_rejected() {
        assert!(StiffnessField::new(vec![1.0, 0.0]).is_err());
        let model = BeamModel::new(1, 2).unwrap();
        assert!(matches!(model.evaluate(&[1.0, -1.0]), Err(Error::Solve { .. })));
    }

    #[test]
    fn constant_beam_tracks_closed_form() {
        let (q, e0) = (1.0, 2.0);
        let mut errs = Vec::new();
        for level in [1, 2, 4] {
            let grid = BeamGrid::new(level).unwrap();
            let u = solve_beam_nodal(&grid, &vec![e0; grid.nodes]).unwrap();
            let err = (0..grid.nodes)
                .map(|k| (u[k] - cantilever(grid.x(k), q, e0)).abs())
                .fold(0.0, f64::max);
            errs.push(err);
        }
        assert!(errs[0] < 1e-3 && errs[2] < errs[1] && errs[1] < errs[0], "{errs:?}");
    }

    #[test]
    fn level_grids() {
        let nodes: Vec<usize> = (1..=6).map(|l| BeamGrid::new(l).unwrap().nodes).collect();
        assert_eq!(nodes, [51, 101, 201, 301, 401, 501]);
        assert!(BeamGrid::new(0).is_err());
    }

    #[test]
    fn zero_load_gives_zero_displacement() {
        let mut grid = BeamGrid::new(1).unwrap();
        grid.load = vec![0.0; grid.nodes];
        let u = solve_beam_nodal(&grid, &vec![1.3; grid.nodes]).unwrap();
        assert!(u.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn doubling_stiffness_halves_displacement() {
        let grid = BeamGrid::new(2).unwrap();
        let u1 = solve_beam_nodal(&grid, &vec![1.5; grid.nodes]).unwrap();
        let u2 = solve_beam_nodal(&grid, &vec![3.0; grid.nodes]).unwrap();
        for (a, b) in u1.iter().zip(&u2) {
            assert!((a - 2.0 * b).abs() <= 1e-12 * a.abs().max(1e-300));
        }
    }

    #[test]
    fn boundary_conditions_hold_to_discretization_order() {
        let grid = BeamGrid::new(4).unwrap();
        let u = solve_beam(&grid, &StiffnessField::new(vec![2.0, 3.0, 2.5]).unwrap()).unwrap();
        let h = grid.h;
        let n = grid.nodes;
        assert_eq!(u[0], 0.0);
        // One-sided slope at the clamp is O(h).
        assert!((u[1] / h).abs() < 10.0 * h);
        let curv_end = (u[n - 3] - 2.0 * u[n - 2] + u[n - 1]) / (h * h);
        let curv_mid = (u[n / 2 - 1] - 2.0 * u[n / 2] + u[n / 2 + 1]) / (h * h);
        assert!(curv_end.abs() < 0.05 * curv_mid.abs());
    }

    #[test]
    fn observation_interpolation_exact_on_linear_fields() {
        let grid = BeamGrid::new(3).unwrap();
        let lin: Vec<f64> = (0..grid.nodes).map(|k| grid.x(k)).collect();
        let obs = observe_beam(&lin, &grid);
        assert_eq!(obs.len(), 41);
        for (j, v) in obs.iter().enumerate() {
            assert!((v - j as f64 / 40.0).abs() < 1e-14);
        }
        let c = vec![0.7; grid.nodes];
        assert!(observe_beam(&c, &grid).iter().all(|v| (v - 0.7).abs() < 1e-15));
    }
}
