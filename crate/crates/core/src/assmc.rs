//! Tempered SMC over the extended active/inactive target with a fixed
//! subspace: reweighting, resampling, pseudo-marginal MH moves, proposal
//! adaptation and both posterior-expectation estimators. The stage
//! machinery here is shared by the plain sampler on the original
//! coordinates (identity basis) and by the adaptive-subspace variant.

use crate::adaptive::{ReprojectionRecord, StageSpectrum};
use crate::asmh::{asmh_step, reweight_cloud, ActiveState, InnerCloud, SamplerContext};
use crate::error::{Error, Result};
use crate::math::{log_sum_exp, normalise_log_weights};
use crate::model::{project_prior, TargetModel};
use crate::proposal::{ActiveProposal, InactiveFamily, InactiveProposal};
use crate::rng::{derive_stream, Purpose, StreamPath};
use crate::smc::{
    multinomial_draw, stratified_resample, LogEvidence, Population,
};
use crate::subspace::{
    estimate_matrix, eigendecompose, split_basis, GapRule, GradientSample, Spectrum, SubspaceBasis,
};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// One outer particle: an active point with its inactive cloud, the
/// selected inner index, and the proposal its cloud is currently weighted
/// under (the proposal appears in the extended target, so it travels with
/// the particle through resampling).
#[derive(Debug, Clone)]
pub struct ActiveParticle {
    pub state: ActiveState,
    pub proposal: InactiveProposal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMode {
    /// Stratified ancestor selection (used throughout by default).
    #[default]
    Stratified,
    /// Independent categorical ancestor draws, as the algorithm listings
    /// write the mixture move.
    Multinomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleTrigger {
    /// Resample and move when ESS < fraction * N.
    EssFraction(f64),
    /// Resample and move at every stage.
    Always,
}

impl Default for ResampleTrigger {
    fn default() -> Self {
        ResampleTrigger::EssFraction(0.5)
    }
}

/// Where the subspace comes from.
#[derive(Debug, Clone)]
pub enum BasisSource {
    /// Estimate once from the initial prior draws with the full-likelihood
    /// score, then split with the given rule.
    PriorSample(GapRule),
    /// Use the given basis unchanged.
    Fixed(SubspaceBasis),
    /// Original coordinates, nothing inactive: the plain SMC sampler.
    Identity,
}

/// Sampler settings shared by the SMC variants.
#[derive(Debug, Clone)]
pub struct SmcSettings {
    pub n_active: usize,
    pub n_inactive: usize,
    pub resample_mode: ResampleMode,
    pub resample_trigger: ResampleTrigger,
    /// Adapt the active random walk to the scaled empirical covariance.
    pub adapt_active: bool,
    /// Family of the adapted inactive proposal; `Prior` disables adaptation.
    pub inactive_family: InactiveFamily,
    /// MH sweeps per resample-move event.
    pub mcmc_sweeps: usize,
    /// Record per-stage population rows for dumping.
    pub record_stages: bool,
}

impl Default for SmcSettings {
    fn default() -> Self {
        SmcSettings {
            n_active: 200,
            n_inactive: 10,
            resample_mode: ResampleMode::Stratified,
            resample_trigger: ResampleTrigger::default(),
            adapt_active: true,
            inactive_family: InactiveFamily::Prior,
            mcmc_sweeps: 1,
            record_stages: false,
        }
    }
}

/// One optional per-stage dump row.
#[derive(Debug, Clone)]
pub struct StageDumpRow {
    pub stage: usize,
    pub particle: usize,
    pub log_weight: f64,
    pub active: Vec<f64>,
    pub log_sum_wtilde: f64,
}

/// Write dump rows as CSV: stage, particle, log weight, active coordinates
/// (fixed width per file), log sum of inner weights.
pub fn write_stage_dump_csv<W: Write>(rows: &[StageDumpRow], out: &mut W) -> Result<()> {
    let width = rows.iter().map(|r| r.active.len()).max().unwrap_or(0);
    let mut header = String::from("stage,particle,log_weight");
    for j in 0..width {
        header.push_str(&format!(",a{j}"));
    }
    header.push_str(",log_sum_wtilde");
    writeln!(out, "{header}")?;
    for r in rows {
        let mut row = format!("{},{},{}", r.stage, r.particle, r.log_weight);
        for j in 0..width {
            match r.active.get(j) {
                Some(v) => row.push_str(&format!(",{v}")),
                None => row.push(','),
            }
        }
        row.push_str(&format!(",{}", r.log_sum_wtilde));
        writeln!(out, "{row}")?;
    }
    Ok(())
}

/// A finished SMC run.
#[derive(Debug)]
pub struct SmcRun {
    /// Posterior-mean estimate using the selected inner point per particle.
    pub mean_single: DVector<f64>,
    /// Posterior-mean estimate using all inner points with their weights.
    pub mean_all_points: DVector<f64>,
    pub log_evidence: f64,
    pub log_evidence_trace: Vec<f64>,
    pub ess_trace: Vec<f64>,
    /// (stage, acceptance rate) for stages where moves ran.
    pub move_acceptance: Vec<(usize, f64)>,
    /// Spectrum trace; one entry per stage for the adaptive sampler, the
    /// initial estimate only for the fixed-subspace samplers.
    pub spectra: Vec<StageSpectrum>,
    /// Change-of-basis records (adaptive sampler, when requested).
    pub reprojections: Vec<ReprojectionRecord>,
    pub final_basis: SubspaceBasis,
    pub final_population: Population<ActiveParticle>,
    pub stage_dump: Vec<StageDumpRow>,
    pub likelihood_evals: u64,
    pub score_evals: u64,
}

/// Which posterior-expectation estimator to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    /// One inner point per particle, chosen by the stored selected index.
    SinglePoint,
    /// All inner points weighted by the normalised inner weights.
    #[default]
    AllPoints,
}

/// Estimate E[g] under the current population.
pub fn estimate_expectation<F>(
    population: &Population<ActiveParticle>,
    basis: &SubspaceBasis,
    mode: EstimatorMode,
    g: F,
) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let weights = population.normalised_weights();
    let mut acc: Option<DVector<f64>> = None;
    for (particle, &w) in population.particles.iter().zip(&weights) {
        let contribution = match mode {
            EstimatorMode::SinglePoint => g(&particle.state.reconstructed(basis)) * w,
            EstimatorMode::AllPoints => {
                let inner = particle.state.cloud.normalised_weights();
                let mut sum: Option<DVector<f64>> = None;
                for (point, &wi) in particle.state.cloud.points.iter().zip(&inner) {
                    let theta = basis.reconstruct(&particle.state.active, point);
                    let value = g(&theta) * wi;
                    sum = Some(match sum {
                        Some(s) => s + value,
                        None => value,
                    });
                }
                sum.expect("clouds are never empty") * w
            }
        };
        acc = Some(match acc {
            Some(a) => a + contribution,
            None => contribution,
        });
    }
    acc.expect("population is never empty")
}

/// Scaled empirical covariance of the active coordinates under the current
/// outer weights, for the random-walk proposal.
pub fn adapt_active_proposal(population: &Population<ActiveParticle>) -> Result<ActiveProposal> {
    let weights = population.normalised_weights();
    let points: Vec<DVector<f64>> = population
        .particles
        .iter()
        .map(|p| p.state.active.clone())
        .collect();
    ActiveProposal::adapted(&points, &weights)
}

/// Per-particle adapted inactive proposals: importance-reweight the stored
/// inner points (excluding the selected one) toward the next-stage
/// conditional and take their weighted moments. Falls back to the prior
/// conditional whenever the moments are unusable.
pub fn adapt_inactive_proposal(
    ctx: SamplerContext,
    population: &Population<ActiveParticle>,
    stage: usize,
    family: InactiveFamily,
) -> Vec<InactiveProposal> {
    population
        .particles
        .iter()
        .map(|particle| adapt_inactive_single(ctx, particle, stage, family))
        .collect()
}

fn adapt_inactive_single(
    ctx: SamplerContext,
    particle: &ActiveParticle,
    stage: usize,
    family: InactiveFamily,
) -> InactiveProposal {
    if family == InactiveFamily::Prior || ctx.basis.inactive_dim() == 0 {
        return InactiveProposal::Prior;
    }
    let cloud = &particle.state.cloud;
    // Need at least two surviving points for a covariance.
    if cloud.len() < 3 {
        return InactiveProposal::Prior;
    }
    let prev = normalise_log_weights(&cloud.log_wtilde);
    let mut log_kappa = Vec::with_capacity(cloud.len() - 1);
    let mut points = Vec::with_capacity(cloud.len() - 1);
    for n in 0..cloud.len() {
        if n == particle.state.selected {
            continue;
        }
        let incr = ctx.model.log_l_stage_cached(&cloud.caches[n], stage);
        log_kappa.push(prev[n].ln() + incr);
        points.push(cloud.points[n].clone());
    }
    let norm = log_sum_exp(&log_kappa);
    if !norm.is_finite() {
        return InactiveProposal::Prior;
    }
    let weights: Vec<f64> = log_kappa.iter().map(|&lk| (lk - norm).exp()).collect();
    InactiveProposal::adapted(family, &points, &weights)
}

pub(crate) struct Engine<'a> {
    pub model: &'a TargetModel,
    pub settings: &'a SmcSettings,
    pub seed: u64,
    pub run: u64,
}

impl<'a> Engine<'a> {
    /// Prior draws that seed both the subspace estimate and the initial
    /// population.
    pub fn draw_initial_points(&self) -> Vec<DVector<f64>> {
        (0..self.settings.n_active)
            .map(|m| {
                let mut rng = derive_stream(
                    self.seed,
                    StreamPath::new(self.run, 0, m as u64, Purpose::PriorInit),
                );
                self.model.sample_prior(&mut rng)
            })
            .collect()
    }

    /// Equal-weight subspace estimate from points with the full score.
    pub fn prior_sample_basis(
        &self,
        thetas: &[DVector<f64>],
        rule: GapRule,
    ) -> Result<(SubspaceBasis, Spectrum)> {
        let w = 1.0 / thetas.len() as f64;
        let samples: Vec<GradientSample> = thetas
            .iter()
            .map(|theta| GradientSample::new(theta.clone(), self.model.score(theta), w))
            .collect();
        let spectrum = eigendecompose(&estimate_matrix(&samples)?)?;
        let basis = split_basis(&spectrum, rule)?;
        // A gapless spectrum keeps every direction active; represent that
        // case on the original coordinates so moves are standard MH.
        if basis.inactive_dim() == 0 {
            Ok((SubspaceBasis::identity(thetas[0].len()), spectrum))
        } else {
            Ok((basis, spectrum))
        }
    }

    /// Initial population: each prior draw contributes its own projection
    /// as the first inactive point (selected index 0), topped up with
    /// draws from the conditional prior; stage-0 inner weights are flat.
    pub fn init_population(
        &self,
        ctx: SamplerContext,
        thetas: &[DVector<f64>],
    ) -> Population<ActiveParticle> {
        let n_inner = ctx.effective_n_inactive(self.settings.n_inactive);
        let particles: Vec<ActiveParticle> = thetas
            .par_iter()
            .enumerate()
            .map(|(m, theta)| {
                let active = ctx.basis.project_active(theta);
                let mut points = Vec::with_capacity(n_inner);
                points.push(ctx.basis.project_inactive(theta));
                if ctx.basis.inactive_dim() > 0 {
                    let mut rng = derive_stream(
                        self.seed,
                        StreamPath::new(self.run, 0, m as u64, Purpose::PriorInit)
                            .with_substream(1),
                    );
                    for _ in 1..n_inner {
                        points.push(ctx.projected.sample_inactive(&active, &mut rng));
                    }
                }
                let caches = points
                    .iter()
                    .map(|point| {
                        let theta_n = ctx.basis.reconstruct(&active, point);
                        ctx.model.likelihood_cache(&theta_n)
                    })
                    .collect();
                ActiveParticle {
                    state: ActiveState {
                        active,
                        cloud: InnerCloud {
                            log_wtilde: vec![0.0; points.len()],
                            points,
                            caches,
                        },
                        selected: 0,
                    },
                    proposal: InactiveProposal::Prior,
                }
            })
            .collect();
        Population::uniform(particles)
    }

    /// Reweight every particle for `stage` under its new proposal; returns
    /// the log incremental weights. Stored inner weights and proposals are
    /// replaced.
    pub fn reweight(
        &self,
        ctx: SamplerContext,
        population: &mut Population<ActiveParticle>,
        new_proposals: Vec<InactiveProposal>,
        stage: usize,
    ) -> Vec<f64> {
        population
            .particles
            .par_iter_mut()
            .zip(new_proposals)
            .map(|(particle, q_new)| {
                let active = &particle.state.active;
                let cloud = &particle.state.cloud;
                let new_wtilde = reweight_cloud(ctx, active, cloud, &q_new, stage);
                let mut increment = log_sum_exp(&new_wtilde) - log_sum_exp(&cloud.log_wtilde);
                if !(q_new.is_prior() && particle.proposal.is_prior()) {
                    for point in &cloud.points {
                        increment += q_new.log_density(ctx.projected, point, active)
                            - particle
                                .proposal
                                .log_density(ctx.projected, point, active);
                    }
                }
                particle.state.cloud.log_wtilde = new_wtilde;
                particle.proposal = q_new;
                increment
            })
            .collect()
    }

    /// Draw the selected inner index per particle from the normalised
    /// inner weights. No-op when nothing is inactive.
    pub fn select_indices(
        &self,
        ctx: SamplerContext,
        population: &mut Population<ActiveParticle>,
        stage: usize,
    ) {
        if ctx.basis.inactive_dim() == 0 {
            return;
        }
        population
            .particles
            .par_iter_mut()
            .enumerate()
            .for_each(|(m, particle)| {
                let mut rng = derive_stream(
                    self.seed,
                    StreamPath::new(self.run, stage as u64, m as u64, Purpose::SelectIndex),
                );
                let weights = particle.state.cloud.normalised_weights();
                particle.state.selected = multinomial_draw(&weights, &mut rng);
            });
    }

    pub fn should_resample(&self, population: &Population<ActiveParticle>) -> Result<bool> {
        match self.settings.resample_trigger {
            ResampleTrigger::Always => Ok(true),
            ResampleTrigger::EssFraction(f) => {
                Ok(population.ess()? < f * population.len() as f64)
            }
        }
    }

    /// Resample ancestors and apply MH moves; returns the acceptance rate.
    pub fn resample_and_move(
        &self,
        ctx: SamplerContext,
        population: &mut Population<ActiveParticle>,
        stage: usize,
        q_active: &ActiveProposal,
    ) -> Result<f64> {
        let weights = population.normalised_weights();
        let ancestors = match self.settings.resample_mode {
            ResampleMode::Stratified => {
                let mut rng = derive_stream(
                    self.seed,
                    StreamPath::new(self.run, stage as u64, 0, Purpose::Resample),
                );
                stratified_resample(&weights, population.len(), &mut rng)
            }
            ResampleMode::Multinomial => (0..population.len())
                .map(|m| {
                    let mut rng = derive_stream(
                        self.seed,
                        StreamPath::new(self.run, stage as u64, m as u64, Purpose::Resample),
                    );
                    multinomial_draw(&weights, &mut rng)
                })
                .collect(),
        };
        population.gather(&ancestors);

        let sweeps = self.settings.mcmc_sweeps.max(1);
        let accepted: Result<Vec<usize>> = population
            .particles
            .par_iter_mut()
            .enumerate()
            .map(|(m, particle)| {
                let mut rng = derive_stream(
                    self.seed,
                    StreamPath::new(self.run, stage as u64, m as u64, Purpose::Move),
                );
                let ActiveParticle { state, proposal } = particle;
                let mut count = 0usize;
                for _ in 0..sweeps {
                    count +=
                        usize::from(asmh_step(state, stage, q_active, proposal, ctx, &mut rng)?);
                }
                Ok(count)
            })
            .collect();
        let accepted = accepted?;
        Ok(accepted.iter().sum::<usize>() as f64 / (population.len() * sweeps) as f64)
    }

    pub fn dump_rows(
        &self,
        population: &Population<ActiveParticle>,
        stage: usize,
        out: &mut Vec<StageDumpRow>,
    ) {
        if !self.settings.record_stages {
            return;
        }
        for (m, (particle, &lw)) in population
            .particles
            .iter()
            .zip(&population.log_weights)
            .enumerate()
        {
            out.push(StageDumpRow {
                stage,
                particle: m,
                log_weight: lw,
                active: particle.state.active.iter().cloned().collect(),
                log_sum_wtilde: particle.state.cloud.log_sum_wtilde(),
            });
        }
    }
}

/// Mutable per-run trackers threaded through the stage loop.
pub(crate) struct RunTrackers {
    pub evidence: LogEvidence,
    pub ess_trace: Vec<f64>,
    pub move_acceptance: Vec<(usize, f64)>,
    pub stage_dump: Vec<StageDumpRow>,
}

impl RunTrackers {
    pub fn new() -> Self {
        RunTrackers {
            evidence: LogEvidence::new(),
            ess_trace: Vec::new(),
            move_acceptance: Vec::new(),
            stage_dump: Vec::new(),
        }
    }
}

/// One stage of the sampler once the basis for this stage is settled:
/// adapt the inactive proposals, reweight, accumulate evidence, draw the
/// selected indices, adapt the random walk, and resample-move on the
/// degeneracy trigger.
pub(crate) fn stage_core(
    engine: &Engine,
    ctx: SamplerContext,
    population: &mut Population<ActiveParticle>,
    stage: usize,
    q_active: &mut ActiveProposal,
    trackers: &mut RunTrackers,
) -> Result<()> {
    let proposals =
        adapt_inactive_proposal(ctx, population, stage, engine.settings.inactive_family);
    let prev = population.log_weights.clone();
    let increments = engine.reweight(ctx, population, proposals, stage);
    trackers.evidence.push_stage(&prev, &increments);
    for (lw, inc) in population.log_weights.iter_mut().zip(&increments) {
        *lw += inc;
    }
    population.normalise();
    engine.select_indices(ctx, population, stage);
    if engine.settings.adapt_active {
        if let Ok(ess) = population.ess() {
            if ess >= 2.0 {
                *q_active = adapt_active_proposal(population)?;
            }
        }
    }
    trackers.ess_trace.push(population.ess()?);
    if engine.should_resample(population)? {
        let rate = engine.resample_and_move(ctx, population, stage, q_active)?;
        trackers.move_acceptance.push((stage, rate));
    }
    engine.dump_rows(population, stage, &mut trackers.stage_dump);
    Ok(())
}

/// Assemble the run output from the final population and trackers.
pub(crate) fn finish_run(
    model: &TargetModel,
    basis: SubspaceBasis,
    population: Population<ActiveParticle>,
    trackers: RunTrackers,
    spectra: Vec<StageSpectrum>,
    reprojections: Vec<ReprojectionRecord>,
) -> SmcRun {
    let mean_single =
        estimate_expectation(&population, &basis, EstimatorMode::SinglePoint, |t| t.clone());
    let mean_all_points =
        estimate_expectation(&population, &basis, EstimatorMode::AllPoints, |t| t.clone());
    SmcRun {
        mean_single,
        mean_all_points,
        log_evidence: trackers.evidence.total(),
        log_evidence_trace: trackers.evidence.trace().to_vec(),
        ess_trace: trackers.ess_trace,
        move_acceptance: trackers.move_acceptance,
        spectra,
        reprojections,
        final_basis: basis,
        final_population: population,
        stage_dump: trackers.stage_dump,
        likelihood_evals: model.likelihood_evals(),
        score_evals: model.score_evals(),
    }
}

/// Run the fixed-subspace SMC sampler.
pub fn run_assmc(
    settings: &SmcSettings,
    basis_source: &BasisSource,
    model: &TargetModel,
    master_seed: u64,
    run: u64,
) -> Result<SmcRun> {
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
    let (basis, initial_spectrum) = match basis_source {
        BasisSource::Identity => (SubspaceBasis::identity(model.dim()), None),
        BasisSource::Fixed(b) => (b.clone(), None),
        BasisSource::PriorSample(rule) => {
            let (b, spectrum) = engine.prior_sample_basis(&thetas, *rule)?;
            (b, Some(spectrum))
        }
    };
    let projected = project_prior(model.prior(), &basis)?;
    let ctx = SamplerContext::new(model, &basis, &projected);

    let mut population = engine.init_population(ctx, &thetas);
    let mut q_active = ActiveProposal::default_for(&projected)?;
    let mut trackers = RunTrackers::new();
    let mut spectra = Vec::new();
    if let Some(spectrum) = &initial_spectrum {
        spectra.push(StageSpectrum::from_spectrum(0, spectrum, basis.active_dim()));
    }

    for stage in 1..=stages {
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
        Vec::new(),
    ))
}
