//! Nested sampler: an inner SMC over the inactive coordinates per active
//! particle (replacing the one-shot importance-sampling estimate), embedded
//! in an outer SMC on the active coordinates with particle-marginal MH
//! rejuvenation.

use crate::asmh::{ActiveState, InnerCloud, SamplerContext};
use crate::assmc::{
    finish_run, ActiveParticle, BasisSource, Engine, ResampleMode, ResampleTrigger, RunTrackers,
    SmcRun, SmcSettings,
};
use crate::adaptive::StageSpectrum;
use crate::error::{Error, Result};
use crate::math::{log_sum_exp, normalise_log_weights};
use crate::model::{project_prior, LikelihoodCache, TargetModel};
use crate::proposal::{ActiveProposal, InactiveFamily, InactiveProposal};
use crate::rng::{derive_stream, Purpose, StreamPath};
use crate::smc::{ess, multinomial_draw, stratified_resample, Population};
use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

/// State of one particle's inner sampler over the inactive coordinates.
#[derive(Debug, Clone)]
pub struct InnerSmcState {
    pub points: Vec<DVector<f64>>,
    pub caches: Vec<LikelihoodCache>,
    /// Normalised log weights of the current stage.
    pub norm_log_w: Vec<f64>,
    /// Unnormalised log weights of the last reweight.
    pub last_unnorm_log_w: Vec<f64>,
    /// Stages advanced so far.
    pub stage: usize,
    /// log sum of unnormalised weights per stage; the running evidence is
    /// their sum.
    pub stage_log_sums: Vec<f64>,
    /// Ancestor indices per stage (identity rows when no resampling fired).
    pub ancestry: Vec<Vec<usize>>,
}

impl InnerSmcState {
    fn from_points(ctx: SamplerContext, active: &DVector<f64>, points: Vec<DVector<f64>>) -> Self {
        let n = points.len();
        let caches = points
            .iter()
            .map(|point| {
                let theta = ctx.basis.reconstruct(active, point);
                ctx.model.likelihood_cache(&theta)
            })
            .collect();
        InnerSmcState {
            points,
            caches,
            norm_log_w: vec![-(n as f64).ln(); n],
            last_unnorm_log_w: vec![-(n as f64).ln(); n],
            stage: 0,
            stage_log_sums: Vec::new(),
            ancestry: Vec::new(),
        }
    }

    /// Fresh state with every point drawn from the conditional prior.
    pub fn init<R: Rng + ?Sized>(
        ctx: SamplerContext,
        active: &DVector<f64>,
        n_inactive: usize,
        rng: &mut R,
    ) -> Self {
        let n = ctx.effective_n_inactive(n_inactive);
        let points = if ctx.basis.inactive_dim() == 0 {
            vec![DVector::zeros(0)]
        } else {
            (0..n)
                .map(|_| ctx.projected.sample_inactive(active, rng))
                .collect()
        };
        InnerSmcState::from_points(ctx, active, points)
    }

    /// State whose first point is given (the projection of an initial draw)
    /// with the remainder from the conditional prior.
    pub fn init_coupled<R: Rng + ?Sized>(
        ctx: SamplerContext,
        active: &DVector<f64>,
        first: DVector<f64>,
        n_inactive: usize,
        rng: &mut R,
    ) -> Self {
        let n = ctx.effective_n_inactive(n_inactive);
        let mut points = Vec::with_capacity(n);
        points.push(first);
        if ctx.basis.inactive_dim() > 0 {
            for _ in 1..n {
                points.push(ctx.projected.sample_inactive(active, rng));
            }
        }
        InnerSmcState::from_points(ctx, active, points)
    }

    /// Running log evidence: the sum of the per-stage log weight sums.
    pub fn log_evidence(&self) -> f64 {
        self.stage_log_sums.iter().sum()
    }
}

/// Advance the reweighting half of one inner stage: compute the stage-s
/// unnormalised weights from the previous normalised weights and the
/// cached likelihood ratio; returns log sum of the unnormalised weights
/// (the incremental-evidence estimate).
pub fn inner_reweight(state: &mut InnerSmcState, ctx: SamplerContext, stage: usize) -> f64 {
    debug_assert_eq!(state.stage + 1, stage);
    let unnorm: Vec<f64> = state
        .norm_log_w
        .iter()
        .zip(&state.caches)
        .map(|(&lw, cache)| {
            lw + ctx.model.log_l_upto_cached(cache, stage)
                - ctx.model.log_l_upto_cached(cache, stage - 1)
        })
        .collect();
    let log_sum = log_sum_exp(&unnorm);
    state.norm_log_w = unnorm.iter().map(|&u| u - log_sum).collect();
    state.last_unnorm_log_w = unnorm;
    state.stage_log_sums.push(log_sum);
    state.stage = stage;
    log_sum
}

/// The resample-and-move half of one inner stage: stratified or categorical
/// ancestors on the degeneracy trigger, then independence-proposal MH
/// sweeps targeting the stage-s conditional.
#[allow(clippy::too_many_arguments)]
pub fn inner_resample_move<R: Rng + ?Sized>(
    state: &mut InnerSmcState,
    ctx: SamplerContext,
    active: &DVector<f64>,
    stage: usize,
    proposal: &InactiveProposal,
    ess_fraction: f64,
    mode: ResampleMode,
    sweeps: usize,
    rng: &mut R,
) -> Result<()> {
    debug_assert_eq!(state.stage, stage);
    if ctx.basis.inactive_dim() == 0 {
        return Ok(());
    }
    let n = state.points.len();
    let population_ess = match ess(&state.norm_log_w) {
        Ok(v) => v,
        // A dead inner population carries -inf evidence; nothing to move.
        Err(Error::PopulationDead) => return Ok(()),
        Err(e) => return Err(e),
    };
    if population_ess < ess_fraction * n as f64 {
        let weights = normalise_log_weights(&state.norm_log_w);
        let ancestors = match mode {
            ResampleMode::Stratified => stratified_resample(&weights, n, rng),
            ResampleMode::Multinomial => {
                (0..n).map(|_| multinomial_draw(&weights, rng)).collect()
            }
        };
        state.points = ancestors.iter().map(|&j| state.points[j].clone()).collect();
        state.caches = ancestors.iter().map(|&j| state.caches[j].clone()).collect();
        state.norm_log_w = vec![-(n as f64).ln(); n];
        state.ancestry.push(ancestors);
    } else {
        state.ancestry.push((0..n).collect());
    }

    for _ in 0..sweeps.max(1) {
        for idx in 0..n {
            let candidate = proposal.sample(ctx.projected, active, rng);
            let log_q_candidate = proposal.log_density(ctx.projected, &candidate, active);
            if log_q_candidate == f64::NEG_INFINITY {
                return Err(Error::InvalidProposalSupport);
            }
            let theta = ctx.basis.reconstruct(active, &candidate);
            let cache = ctx.model.likelihood_cache(&theta);
            let log_num = ctx.model.log_l_upto_cached(&cache, stage)
                + ctx.projected.log_inactive(&candidate, active)
                + proposal.log_density(ctx.projected, &state.points[idx], active);
            let log_den = ctx.model.log_l_upto_cached(&state.caches[idx], stage)
                + ctx.projected.log_inactive(&state.points[idx], active)
                + log_q_candidate;
            let log_alpha = log_num - log_den;
            if log_alpha.is_nan() {
                return Err(Error::NonFiniteAcceptance);
            }
            if rng.gen::<f64>().ln() < log_alpha {
                state.points[idx] = candidate;
                state.caches[idx] = cache;
            }
        }
    }
    Ok(())
}

/// Run the inner sampler from scratch up to `up_to_stage` at a fixed active
/// point, returning the log evidence estimate and the state. Per-stage
/// proposals are indexed by stage - 1. When `move_at_final` is false the
/// final stage stops after reweighting (the standalone estimator form);
/// inside the nested sampler every stage moves, keeping the rejuvenation
/// runs aligned with the incrementally advanced states.
#[allow(clippy::too_many_arguments)]
pub fn inner_smc<R: Rng + ?Sized>(
    ctx: SamplerContext,
    active: &DVector<f64>,
    up_to_stage: usize,
    n_inactive: usize,
    proposals: &[InactiveProposal],
    ess_fraction: f64,
    mode: ResampleMode,
    sweeps: usize,
    move_at_final: bool,
    rng: &mut R,
) -> Result<(f64, InnerSmcState)> {
    if up_to_stage == 0 {
        return Err(Error::StageOutOfRange {
            stage: 0,
            stages: ctx.model.stages(),
        });
    }
    let mut state = InnerSmcState::init(ctx, active, n_inactive, rng);
    for stage in 1..=up_to_stage {
        inner_reweight(&mut state, ctx, stage);
        if stage < up_to_stage || move_at_final {
            let proposal = proposals.get(stage - 1).unwrap_or(&InactiveProposal::Prior);
            inner_resample_move(
                &mut state,
                ctx,
                active,
                stage,
                proposal,
                ess_fraction,
                mode,
                sweeps,
                rng,
            )?;
        }
    }
    Ok((state.log_evidence(), state))
}

/// One outer particle of the nested sampler.
#[derive(Debug, Clone)]
pub struct Smc2Particle {
    pub active: DVector<f64>,
    pub inner: InnerSmcState,
}

/// Advance a particle's inner sampler one outer stage and return the log
/// incremental weight for the outer sampler.
#[allow(clippy::too_many_arguments)]
pub fn assmc2_reweight<R: Rng + ?Sized>(
    particle: &mut Smc2Particle,
    ctx: SamplerContext,
    stage: usize,
    proposal: &InactiveProposal,
    ess_fraction: f64,
    mode: ResampleMode,
    sweeps: usize,
    rng: &mut R,
) -> Result<f64> {
    let increment = inner_reweight(&mut particle.inner, ctx, stage);
    inner_resample_move(
        &mut particle.inner,
        ctx,
        &particle.active,
        stage,
        proposal,
        ess_fraction,
        mode,
        sweeps,
        rng,
    )?;
    Ok(increment)
}

/// Particle-marginal MH move: propose a new active point, run a fresh inner
/// sampler up to the current stage, and accept or reject swapping the whole
/// inner state. A rejected move leaves the particle untouched.
#[allow(clippy::too_many_arguments)]
pub fn aspmmh_move<R: Rng + ?Sized>(
    particle: &mut Smc2Particle,
    ctx: SamplerContext,
    stage: usize,
    q_active: &ActiveProposal,
    n_inactive: usize,
    proposals: &[InactiveProposal],
    ess_fraction: f64,
    mode: ResampleMode,
    sweeps: usize,
    rng: &mut R,
) -> Result<bool> {
    let proposed_active = q_active.propose(&particle.active, rng);
    let (proposed_evidence, proposed_inner) = inner_smc(
        ctx,
        &proposed_active,
        stage,
        n_inactive,
        proposals,
        ess_fraction,
        mode,
        sweeps,
        true,
        rng,
    )?;
    let hastings = q_active.log_density(&proposed_active, &particle.active)
        - q_active.log_density(&particle.active, &proposed_active);
    let log_alpha = ctx.projected.log_active(&proposed_active)
        - ctx.projected.log_active(&particle.active)
        + hastings
        + proposed_evidence
        - particle.inner.log_evidence();
    if log_alpha.is_nan() {
        return Err(Error::NonFiniteAcceptance);
    }
    let accept = rng.gen::<f64>().ln() < log_alpha;
    if accept {
        particle.active = proposed_active;
        particle.inner = proposed_inner;
    }
    Ok(accept)
}

/// Pooled adaptation of the shared inner independence proposal: the doubly
/// weighted mean and covariance of all particles' current inner points.
pub fn adapt_inner_proposal(
    outer_weights: &[f64],
    particles: &[Smc2Particle],
    family: InactiveFamily,
) -> InactiveProposal {
    if family == InactiveFamily::Prior {
        return InactiveProposal::Prior;
    }
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for (particle, &omega) in particles.iter().zip(outer_weights) {
        let inner = normalise_log_weights(&particle.inner.norm_log_w);
        for (point, &w) in particle.inner.points.iter().zip(&inner) {
            points.push(point.clone());
            weights.push(omega * w);
        }
    }
    InactiveProposal::adapted(family, &points, &weights)
}

/// Settings for the nested sampler: the shared SMC settings plus the inner
/// sampler's move count and degeneracy threshold.
#[derive(Debug, Clone)]
pub struct Smc2Settings {
    pub base: SmcSettings,
    pub inner_sweeps: usize,
    pub inner_ess_fraction: f64,
}

impl Default for Smc2Settings {
    fn default() -> Self {
        Smc2Settings {
            base: SmcSettings::default(),
            inner_sweeps: 1,
            inner_ess_fraction: 0.5,
        }
    }
}

/// Run the nested active-subspace sampler with a fixed basis.
pub fn run_assmc2(
    settings: &Smc2Settings,
    basis_source: &BasisSource,
    model: &TargetModel,
    master_seed: u64,
    run: u64,
) -> Result<SmcRun> {
    let base = &settings.base;
    if base.n_active < 2 {
        return Err(Error::InvalidConfig("need at least two particles".into()));
    }
    let engine = Engine {
        model,
        settings: base,
        seed: master_seed,
        run,
    };
    let stages = model.stages();
    let thetas = engine.draw_initial_points();
    let (basis, initial_spectrum) = match basis_source {
        BasisSource::Identity => (crate::subspace::SubspaceBasis::identity(model.dim()), None),
        BasisSource::Fixed(b) => (b.clone(), None),
        BasisSource::PriorSample(rule) => {
            let (b, spectrum) = engine.prior_sample_basis(&thetas, *rule)?;
            (b, Some(spectrum))
        }
    };
    let projected = project_prior(model.prior(), &basis)?;
    let ctx = SamplerContext::new(model, &basis, &projected);

    let particles: Vec<Smc2Particle> = thetas
        .par_iter()
        .enumerate()
        .map(|(m, theta)| {
            let active = ctx.basis.project_active(theta);
            let first = ctx.basis.project_inactive(theta);
            let mut rng = derive_stream(
                master_seed,
                StreamPath::new(run, 0, m as u64, Purpose::PriorInit).with_substream(1),
            );
            let inner =
                InnerSmcState::init_coupled(ctx, &active, first, base.n_inactive, &mut rng);
            Smc2Particle { active, inner }
        })
        .collect();
    let mut population = Population::uniform(particles);
    let mut q_active = ActiveProposal::default_for(&projected)?;
    let mut trackers = RunTrackers::new();
    let mut spectra = Vec::new();
    if let Some(spectrum) = &initial_spectrum {
        spectra.push(StageSpectrum::from_spectrum(0, spectrum, basis.active_dim()));
    }
    let mut stage_proposals: Vec<InactiveProposal> = Vec::with_capacity(stages);

    for stage in 1..=stages {
        // Reweight half of the inner advance, for every particle.
        let increments: Vec<f64> = population
            .particles
            .par_iter_mut()
            .map(|particle| inner_reweight(&mut particle.inner, ctx, stage))
            .collect();

        // Pool the shared inner proposal from the reweighted populations.
        let proposal = if base.inactive_family != InactiveFamily::Prior
            && basis.inactive_dim() > 0
        {
            let reweighted: Vec<f64> = population
                .log_weights
                .iter()
                .zip(&increments)
                .map(|(&lw, &inc)| lw + inc)
                .collect();
            adapt_inner_proposal(
                &normalise_log_weights(&reweighted),
                &population.particles,
                base.inactive_family,
            )
        } else {
            InactiveProposal::Prior
        };

        // Move half of the inner advance.
        let advance: Result<Vec<()>> = population
            .particles
            .par_iter_mut()
            .enumerate()
            .map(|(m, particle)| {
                let mut rng = derive_stream(
                    master_seed,
                    StreamPath::new(run, stage as u64, m as u64, Purpose::InnerAdvance),
                );
                inner_resample_move(
                    &mut particle.inner,
                    ctx,
                    &particle.active,
                    stage,
                    &proposal,
                    settings.inner_ess_fraction,
                    base.resample_mode,
                    settings.inner_sweeps,
                    &mut rng,
                )
            })
            .collect();
        advance?;
        stage_proposals.push(proposal);

        let prev = population.log_weights.clone();
        trackers.evidence.push_stage(&prev, &increments);
        for (lw, inc) in population.log_weights.iter_mut().zip(&increments) {
            *lw += inc;
        }
        population.normalise();
        if base.adapt_active {
            if let Ok(pop_ess) = population.ess() {
                if pop_ess >= 2.0 {
                    let weights = population.normalised_weights();
                    let points: Vec<DVector<f64>> = population
                        .particles
                        .iter()
                        .map(|p| p.active.clone())
                        .collect();
                    q_active = ActiveProposal::adapted(&points, &weights)?;
                }
            }
        }
        trackers.ess_trace.push(population.ess()?);

        let do_resample = match base.resample_trigger {
            ResampleTrigger::Always => true,
            ResampleTrigger::EssFraction(f) => {
                population.ess()? < f * population.len() as f64
            }
        };
        if do_resample {
            let weights = population.normalised_weights();
            let ancestors = match base.resample_mode {
                ResampleMode::Stratified => {
                    let mut rng = derive_stream(
                        master_seed,
                        StreamPath::new(run, stage as u64, 0, Purpose::Resample),
                    );
                    stratified_resample(&weights, population.len(), &mut rng)
                }
                ResampleMode::Multinomial => (0..population.len())
                    .map(|m| {
                        let mut rng = derive_stream(
                            master_seed,
                            StreamPath::new(run, stage as u64, m as u64, Purpose::Resample),
                        );
                        multinomial_draw(&weights, &mut rng)
                    })
                    .collect(),
            };
            population.gather(&ancestors);
            let accepted: Result<Vec<usize>> = population
                .particles
                .par_iter_mut()
                .enumerate()
                .map(|(m, particle)| {
                    let mut rng = derive_stream(
                        master_seed,
                        StreamPath::new(run, stage as u64, m as u64, Purpose::Move),
                    );
                    let mut count = 0usize;
                    for _ in 0..base.mcmc_sweeps.max(1) {
                        count += usize::from(aspmmh_move(
                            particle,
                            ctx,
                            stage,
                            &q_active,
                            base.n_inactive,
                            &stage_proposals,
                            settings.inner_ess_fraction,
                            base.resample_mode,
                            settings.inner_sweeps,
                            &mut rng,
                        )?);
                    }
                    Ok(count)
                })
                .collect();
            let accepted = accepted?;
            let rate = accepted.iter().sum::<usize>() as f64
                / (population.len() * base.mcmc_sweeps.max(1)) as f64;
            trackers.move_acceptance.push((stage, rate));
        }
    }

    // Convert to the common particle shape, drawing the selected index from
    // the final inner weights for the single-point estimator.
    let final_particles: Vec<ActiveParticle> = population
        .particles
        .iter()
        .enumerate()
        .map(|(m, particle)| {
            let selected = if basis.inactive_dim() == 0 {
                0
            } else {
                let mut rng = derive_stream(
                    master_seed,
                    StreamPath::new(run, stages as u64, m as u64, Purpose::SelectIndex),
                );
                multinomial_draw(&normalise_log_weights(&particle.inner.norm_log_w), &mut rng)
            };
            ActiveParticle {
                state: ActiveState {
                    active: particle.active.clone(),
                    cloud: InnerCloud {
                        points: particle.inner.points.clone(),
                        log_wtilde: particle.inner.norm_log_w.clone(),
                        caches: particle.inner.caches.clone(),
                    },
                    selected,
                },
                proposal: stage_proposals
                    .last()
                    .cloned()
                    .unwrap_or(InactiveProposal::Prior),
            }
        })
        .collect();
    let final_population = Population {
        particles: final_particles,
        log_weights: population.log_weights.clone(),
    };
    Ok(finish_run(
        model,
        basis,
        final_population,
        trackers,
        spectra,
        Vec::new(),
    ))
}
