pub mod bayes;
pub mod divergence;
pub mod ensemble;
pub mod error;
pub mod forward;
pub mod harness;
pub mod kernel;
pub mod linalg;
pub mod mcmc;
pub mod mlsvgd;
pub mod par;
pub mod problems;
pub mod rng;
pub mod svgd;
pub mod target;

pub use error::{Error, Result};
