//! Parameter-to-observable maps built on finite-difference PDE solvers.

pub mod banded;
pub mod beam;
pub mod diffusion_reaction;

use crate::error::Result;

/// A discretized forward model `G_ℓ : θ ↦ predicted observations`.
pub trait ForwardModel: Send + Sync {
    fn parameter_dim(&self) -> usize;

    fn output_dim(&self) -> usize;

    fn evaluate(&self, theta: &[f64]) -> Result<Vec<f64>>;

    /// Evaluates several nearby parameters at once. Implementations may reuse
    /// work across the batch (e.g. warm starts); results must not depend on it
    /// beyond solver tolerance.
    fn evaluate_batch(&self, thetas: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        thetas.iter().map(|t| self.evaluate(t)).collect()
    }

    /// Like [`evaluate_batch`](Self::evaluate_batch), but may keep state per
    /// `slot` (e.g. the last solution as a warm start). A slot must only be
    /// used by one caller at a time.
    fn evaluate_batch_cached(&self, slot: usize, thetas: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let _ = slot;
        self.evaluate_batch(thetas)
    }

    /// Drops all per-slot state.
    fn clear_cache(&self) {}

    fn label(&self) -> String;
}
