//! Sequential Monte Carlo samplers that exploit likelihood-informed
//! ("active") subspaces: a pseudo-marginal MH chain on the active
//! coordinates, tempered SMC with a fixed or adaptively re-estimated
//! subspace, a nested sampler that replaces the importance-sampling
//! likelihood estimate with an inner SMC, and a plain SMC baseline —
//! plus the benchmark toy models and an experiment harness.
//!
//! The subspace is the span of the directions in which the score
//! varies most, estimated by the eigendecomposition of a weighted
//! outer-product matrix of score vectors; directions the likelihood is
//! flat along are sampled from their exact Gaussian prior conditional
//! instead of being explored by MCMC.

pub mod adaptive;
pub mod asmh;
pub mod assmc;
pub mod assmc2;
pub mod baseline;
pub mod error;
pub mod gaussian;
pub mod harness;
pub mod math;
pub mod model;
pub mod proposal;
pub mod rng;
pub mod smc;
pub mod subspace;
pub mod toymodels;

pub use error::{Error, Result};
