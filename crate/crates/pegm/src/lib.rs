//! Pairwise exponential-family graphical models over p nodes, with the
//! normalizing constant handled by importance sampling from the model's own
//! independence (diagonal) part.
//!
//! The crate covers three families behind one interface (binary Ising, Poisson
//! counts with nonpositive interactions, and a Gaussian oracle used to check
//! the estimators against closed forms), plus the machinery built on top of
//! the normalizer estimates: stochastic proximal-gradient likelihood fits with
//! optional l1 penalty, cross-validation, stability selection, bootstrap
//! intervals, constrained Hamiltonian Monte Carlo over the posterior,
//! fully-visible and hidden-unit Boltzmann machines, node-wise pseudo-likelihood
//! baselines, and simulation benchmark drivers.
//!
//! Everything that consumes randomness takes an explicit `u64` seed and is
//! bit-reproducible for a fixed seed, independent of thread count.

pub mod bayes;
pub mod bench;
pub mod boltzmann;
pub mod enumeration;
pub mod error;
pub mod importance;
pub mod io;
pub mod model;
pub mod optimize;
pub mod pseudo;
pub mod rng;
pub mod sampler;

pub use error::{PegmError, Result};
pub use model::{DataMatrix, ModelFamily, ThetaMatrix};
