//! SMC whose subspace is re-estimated at every iteration from the current
//! weighted population, with a conditional importance-sampling change of
//! basis ("reprojection") that leaves the outer weights untouched, and the
//! degenerate transitions to and from a fully active space.

use crate::asmh::{ActiveState, InnerCloud, SamplerContext};
use crate::assmc::{
    finish_run, stage_core, ActiveParticle, Engine, SmcRun, SmcSettings,
};
use crate::error::{Error, Result};
use crate::model::{project_prior, TargetModel};
use crate::proposal::{ActiveProposal, InactiveProposal};
use crate::rng::{derive_stream, Purpose, StreamPath};
use crate::smc::Population;
use crate::subspace::{
    estimate_matrix, eigendecompose, split_basis, GapRule, GradientSample, Spectrum, SubspaceBasis,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::io::Write;

/// Eigen-spectrum recorded at one stage, for the basis-evolution trace.
#[derive(Debug, Clone, Serialize)]
pub struct StageSpectrum {
    pub stage: usize,
    pub eigenvalues: Vec<f64>,
    pub active_dim: usize,
    /// Fraction of spectral mass carried by the leading direction.
    pub leading_fraction: f64,
}

impl StageSpectrum {
    pub fn from_spectrum(stage: usize, spectrum: &Spectrum, active_dim: usize) -> Self {
        StageSpectrum {
            stage,
            eigenvalues: spectrum.eigenvalues.iter().cloned().collect(),
            active_dim,
            leading_fraction: spectrum.explained_fraction(1),
        }
    }
}

/// Write spectrum traces as CSV: stage, index, eigenvalue, cumulative
/// explained fraction.
pub fn write_spectra_csv<W: Write>(traces: &[StageSpectrum], out: &mut W) -> Result<()> {
    writeln!(out, "stage,index,eigenvalue,explained_fraction")?;
    for t in traces {
        let total: f64 = t.eigenvalues.iter().map(|&l| l.max(0.0)).sum();
        let mut head = 0.0;
        for (j, &l) in t.eigenvalues.iter().enumerate() {
            head += l.max(0.0);
            let fraction = if total > 0.0 { head / total } else { 0.0 };
            writeln!(out, "{},{},{},{}", t.stage, j + 1, l, fraction)?;
        }
    }
    Ok(())
}

/// What happened to the inactive dimension across a change of basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisTransition {
    /// Inactive directions on both sides.
    Regular,
    /// The new basis has no inactive directions: collapse to the plain
    /// parameterisation.
    ToZero,
    /// The old basis had none: split a plain point into coordinates.
    FromZero,
    /// Neither side has inactive directions: plain SMC stage, no transform.
    ZeroZero,
}

pub fn transition_kind(old: &SubspaceBasis, new: &SubspaceBasis) -> BasisTransition {
    match (old.inactive_dim() == 0, new.inactive_dim() == 0) {
        (false, false) => BasisTransition::Regular,
        (false, true) => BasisTransition::ToZero,
        (true, false) => BasisTransition::FromZero,
        (true, true) => BasisTransition::ZeroZero,
    }
}

/// Record of one change of basis, for the weight-preservation checks.
#[derive(Debug, Clone)]
pub struct ReprojectionRecord {
    pub stage: usize,
    pub log_weights_before: Vec<f64>,
    pub log_weights_after: Vec<f64>,
    pub ess_before: f64,
    pub ess_after: f64,
    pub max_reconstruction_error: f64,
}

/// Re-estimate the subspace from the current weighted population using the
/// stage-t score, doubly weighted by the outer and inner weights. New
/// eigenvectors are sign-aligned against the previous basis so the traced
/// basis does not flip spuriously; when the split keeps every direction
/// active the identity basis is returned and moves fall back to standard
/// MH.
pub fn reestimate_basis(
    model: &TargetModel,
    old_basis: &SubspaceBasis,
    population: &Population<ActiveParticle>,
    stage: usize,
    rule: GapRule,
) -> Result<(SubspaceBasis, Spectrum)> {
    let outer = population.normalised_weights();
    let mut samples = Vec::with_capacity(population.len());
    for (particle, &omega) in population.particles.iter().zip(&outer) {
        let inner = particle.state.cloud.normalised_weights();
        for (point, &w) in particle.state.cloud.points.iter().zip(&inner) {
            let theta = old_basis.reconstruct(&particle.state.active, point);
            let gradient = model.score_upto(&theta, stage)?;
            samples.push(GradientSample::new(theta, gradient, omega * w));
        }
    }
    let mut spectrum = eigendecompose(&estimate_matrix(&samples)?)?;
    align_spectrum_signs(&mut spectrum, old_basis);
    let basis = split_basis(&spectrum, rule)?;
    if basis.inactive_dim() == 0 {
        Ok((SubspaceBasis::identity(model.dim()), spectrum))
    } else {
        Ok((basis, spectrum))
    }
}

/// Flip eigenvector signs to maximise the diagonal of V_new^T V_old.
fn align_spectrum_signs(spectrum: &mut Spectrum, old_basis: &SubspaceBasis) {
    let d = spectrum.dim();
    let mut reference = DMatrix::zeros(d, d);
    let d_a = old_basis.active_dim();
    reference
        .view_mut((0, 0), (d, d_a))
        .copy_from(old_basis.active_matrix());
    if old_basis.inactive_dim() > 0 {
        reference
            .view_mut((0, d_a), (d, old_basis.inactive_dim()))
            .copy_from(old_basis.inactive_matrix());
    }
    for j in 0..d {
        let dot = spectrum.eigenvectors.column(j).dot(&reference.column(j));
        if dot < 0.0 {
            let negated = -spectrum.eigenvectors.column(j).clone_owned();
            spectrum.eigenvectors.set_column(j, &negated);
        }
    }
}

/// Conditional importance-sampling change of basis for one particle. The
/// selected inner point (drawn from the inner weights at the previous
/// stage) rides along exactly; the remaining points are redrawn from
/// `kappa`; inner weights are recomputed for the previous-stage likelihood
/// under `kappa`. The outer weight is untouched: the backwards-kernel
/// construction makes the importance weight one.
///
/// Returns the reprojected particle and the reconstruction error of the
/// carried point.
pub fn reproject<R: Rng + ?Sized>(
    particle: &ActiveParticle,
    old_basis: &SubspaceBasis,
    new_ctx: SamplerContext,
    kappa: &InactiveProposal,
    n_inactive: usize,
    stage: usize,
    rng: &mut R,
) -> Result<(ActiveParticle, f64)> {
    let prev_stage = stage - 1;
    let new_basis = new_ctx.basis;
    match transition_kind(old_basis, new_basis) {
        BasisTransition::ZeroZero => Ok((particle.clone(), 0.0)),
        BasisTransition::ToZero => {
            let carried = particle.state.reconstructed(old_basis);
            let cache = new_ctx.model.likelihood_cache(&carried);
            let log_l = new_ctx.model.log_l_upto_cached(&cache, prev_stage);
            let state = ActiveState {
                active: carried,
                cloud: InnerCloud {
                    points: vec![DVector::zeros(0)],
                    log_wtilde: vec![log_l],
                    caches: vec![cache],
                },
                selected: 0,
            };
            Ok((
                ActiveParticle {
                    state,
                    proposal: InactiveProposal::Prior,
                },
                0.0,
            ))
        }
        BasisTransition::FromZero | BasisTransition::Regular => {
            let (carried, keep_slot) = match transition_kind(old_basis, new_basis) {
                BasisTransition::FromZero => (particle.state.active.clone(), 0),
                _ => (
                    particle.state.reconstructed(old_basis),
                    particle.state.selected,
                ),
            };
            let active = new_basis.project_active(&carried);
            let carried_inactive = new_basis.project_inactive(&carried);
            let reconstruction_error = (new_basis.reconstruct(&active, &carried_inactive)
                - &carried)
                .abs()
                .max();
            let n_inner = new_ctx.effective_n_inactive(n_inactive);
            let mut points = Vec::with_capacity(n_inner);
            for slot in 0..n_inner {
                if slot == keep_slot {
                    points.push(carried_inactive.clone());
                } else {
                    points.push(kappa.sample(new_ctx.projected, &active, rng));
                }
            }
            let caches: Vec<_> = points
                .iter()
                .map(|point| {
                    let theta = new_basis.reconstruct(&active, point);
                    new_ctx.model.likelihood_cache(&theta)
                })
                .collect();
            let log_wtilde: Vec<f64> = points
                .iter()
                .zip(&caches)
                .map(|(point, cache)| {
                    new_ctx.projected.log_inactive(point, &active)
                        + new_ctx.model.log_l_upto_cached(cache, prev_stage)
                        - kappa.log_density(new_ctx.projected, point, &active)
                })
                .collect();
            Ok((
                ActiveParticle {
                    state: ActiveState {
                        active,
                        cloud: InnerCloud {
                            points,
                            log_wtilde,
                            caches,
                        },
                        selected: keep_slot,
                    },
                    proposal: kappa.clone(),
                },
                reconstruction_error,
            ))
        }
    }
}

/// Whether the subspace is re-estimated every iteration or estimated once
/// from the prior draws and then frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdaptiveBasisMode {
    #[default]
    Readapt,
    Frozen,
}

/// Run the adaptive-subspace SMC sampler.
pub fn run_adaptive_assmc(
    settings: &SmcSettings,
    rule: GapRule,
    mode: AdaptiveBasisMode,
    record_reprojections: bool,
    model: &TargetModel,
    master_seed: u64,
    run: u64,
) -> Result<SmcRun> {
    if mode == AdaptiveBasisMode::Frozen {
        // A frozen basis needs no change-of-basis step: the run is exactly
        // the fixed-subspace sampler.
        return crate::assmc::run_assmc(
            settings,
            &crate::assmc::BasisSource::PriorSample(rule),
            model,
            master_seed,
            run,
        );
    }
    if settings.n_active < 2 {
        return Err(Error::InvalidConfig("need at least two particles".into()));
    }
    let engine = Engine {
        model,
        settings,
        seed: master_seed,
        run,
    };
    let stages = model.stages();
    let thetas = engine.draw_initial_points();
    let (mut basis, spectrum0) = engine.prior_sample_basis(&thetas, rule)?;
    let mut projected = project_prior(model.prior(), &basis)?;
    let mut population = {
        let ctx = SamplerContext::new(model, &basis, &projected);
        engine.init_population(ctx, &thetas)
    };

    let mut trackers = crate::assmc::RunTrackers::new();
    let mut spectra = vec![StageSpectrum::from_spectrum(0, &spectrum0, basis.active_dim())];
    let mut reprojections = Vec::new();

    for stage in 1..=stages {
        let (new_basis, spectrum) =
            reestimate_basis(model, &basis, &population, stage, rule)?;
        spectra.push(StageSpectrum::from_spectrum(
            stage,
            &spectrum,
            new_basis.active_dim(),
        ));
        let new_projected = project_prior(model.prior(), &new_basis)?;
        let new_ctx = SamplerContext::new(model, &new_basis, &new_projected);
        let kappa = InactiveProposal::Prior;

        let before = record_reprojections.then(|| population.log_weights.clone());
        let ess_before = population.ess()?;
        let reprojected: Result<Vec<(ActiveParticle, f64)>> = population
            .particles
            .par_iter()
            .enumerate()
            .map(|(m, particle)| {
                let mut rng = derive_stream(
                    master_seed,
                    StreamPath::new(run, stage as u64, m as u64, Purpose::Reproject),
                );
                reproject(
                    particle,
                    &basis,
                    new_ctx,
                    &kappa,
                    settings.n_inactive,
                    stage,
                    &mut rng,
                )
            })
            .collect();
        let mut max_error = 0.0_f64;
        population.particles = reprojected?
            .into_iter()
            .map(|(particle, err)| {
                max_error = max_error.max(err);
                particle
            })
            .collect();
        if let Some(before) = before {
            reprojections.push(ReprojectionRecord {
                stage,
                log_weights_before: before,
                log_weights_after: population.log_weights.clone(),
                ess_before,
                ess_after: population.ess()?,
                max_reconstruction_error: max_error,
            });
        }
        basis = new_basis;
        projected = new_projected;

        let ctx = SamplerContext::new(model, &basis, &projected);
        let mut q_active = ActiveProposal::default_for(&projected)?;
        stage_core(
            &engine,
            ctx,
            &mut population,
            stage,
            &mut q_active,
            &mut trackers,
        )?;
    }

    Ok(finish_run(
        model,
        basis,
        population,
        trackers,
        spectra,
        reprojections,
    ))
}
