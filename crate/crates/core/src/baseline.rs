//! The comparison sampler: tempered SMC directly on the model parameters
//! with stratified resampling and adaptive Gaussian random-walk MH moves.
//! It is the subspace engine run on the identity basis, so the two coincide
//! bit-for-bit when the subspace samplers have nothing inactive.

use crate::assmc::{run_assmc, ActiveParticle, BasisSource, SmcRun, SmcSettings};
use crate::error::Result;
use crate::model::TargetModel;
use crate::smc::Population;
use nalgebra::DVector;

/// One weighted point on the original coordinates.
#[derive(Debug, Clone)]
pub struct ThetaParticle {
    pub theta: DVector<f64>,
    pub log_weight: f64,
}

/// Settings for the plain sampler; `n_particles` plays the role the active
/// particle count plays for the subspace samplers.
#[derive(Debug, Clone)]
pub struct BaselineSettings {
    pub n_particles: usize,
    pub resample_mode: crate::assmc::ResampleMode,
    pub resample_trigger: crate::assmc::ResampleTrigger,
    pub adapt_proposal: bool,
    pub mcmc_sweeps: usize,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        BaselineSettings {
            n_particles: 2000,
            resample_mode: crate::assmc::ResampleMode::default(),
            resample_trigger: crate::assmc::ResampleTrigger::default(),
            adapt_proposal: true,
            mcmc_sweeps: 1,
        }
    }
}

/// Run the standard tempered SMC sampler on the original coordinates.
pub fn run_standard_smc(
    settings: &BaselineSettings,
    model: &TargetModel,
    master_seed: u64,
    run: u64,
) -> Result<SmcRun> {
    let smc_settings = SmcSettings {
        n_active: settings.n_particles,
        n_inactive: 1,
        resample_mode: settings.resample_mode,
        resample_trigger: settings.resample_trigger,
        adapt_active: settings.adapt_proposal,
        inactive_family: crate::proposal::InactiveFamily::Prior,
        mcmc_sweeps: settings.mcmc_sweeps,
        record_stages: false,
    };
    run_assmc(
        &smc_settings,
        &BasisSource::Identity,
        model,
        master_seed,
        run,
    )
}

/// Extract the weighted points of a population produced on the identity
/// basis (or any basis: the represented point is reconstructed).
pub fn theta_particles(
    population: &Population<ActiveParticle>,
    basis: &crate::subspace::SubspaceBasis,
) -> Vec<ThetaParticle> {
    population
        .particles
        .iter()
        .zip(&population.log_weights)
        .map(|(particle, &log_weight)| ThetaParticle {
            theta: particle.state.reconstructed(basis),
            log_weight,
        })
        .collect()
}
