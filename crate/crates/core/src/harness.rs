//! Experiment harness: JSON run configurations, seeded multi-run
//! execution, RMSE aggregation against a configured truth, and result /
//! trace files for the comparison tables.

use crate::adaptive::{run_adaptive_assmc, write_spectra_csv, AdaptiveBasisMode};
use crate::asmh::{run_asmh, AsmhConfig};
use crate::assmc::{
    run_assmc, write_stage_dump_csv, BasisSource, EstimatorMode, ResampleMode, ResampleTrigger,
    SmcRun, SmcSettings,
};
use crate::assmc2::{run_assmc2, Smc2Settings};
use crate::baseline::{run_standard_smc, BaselineSettings};
use crate::error::{Error, Result};
use crate::model::{TargetModel, Tempering};
use crate::proposal::InactiveFamily;
use crate::smc::{pilot_adaptive_schedule, TemperingSchedule};
use crate::subspace::GapRule;
use crate::toymodels::{BananaModel, GaussCauchyModel, PlaneModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Which sampler an experiment runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "smc")]
    Smc,
    #[serde(rename = "as-smc")]
    AsSmc,
    #[serde(rename = "adaptive-as-smc")]
    AdaptiveAsSmc,
    #[serde(rename = "as-smc2")]
    AsSmc2,
    #[serde(rename = "as-mh")]
    AsMh,
}

impl Algorithm {
    pub fn label(&self) -> &'static str {
        match self {
            Algorithm::Smc => "smc",
            Algorithm::AsSmc => "as-smc",
            Algorithm::AdaptiveAsSmc => "adaptive-as-smc",
            Algorithm::AsSmc2 => "as-smc2",
            Algorithm::AsMh => "as-mh",
        }
    }
}

/// Model selection by name and parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Plane {
        dim: usize,
        n_obs: usize,
        prior_var: f64,
        data_seed: u64,
    },
    Banana {
        dim: usize,
        squared: usize,
        curvature: f64,
        n_obs: usize,
        prior_var: f64,
        data_seed: u64,
    },
    GaussCauchy {
        sigma: Vec<f64>,
        gamma: Vec<f64>,
        prior_var: f64,
    },
}

impl ModelConfig {
    pub fn dim(&self) -> usize {
        match self {
            ModelConfig::Plane { dim, .. } | ModelConfig::Banana { dim, .. } => *dim,
            ModelConfig::GaussCauchy { sigma, .. } => sigma.len(),
        }
    }

    pub fn build(&self, tempering: Tempering) -> Result<TargetModel> {
        match self {
            ModelConfig::Plane {
                dim,
                n_obs,
                prior_var,
                data_seed,
            } => PlaneModel::with_synthetic_data(*dim, *n_obs, *prior_var, *data_seed)
                .target(tempering),
            ModelConfig::Banana {
                dim,
                squared,
                curvature,
                n_obs,
                prior_var,
                data_seed,
            } => BananaModel::with_synthetic_data(
                *dim, *squared, *curvature, *n_obs, *prior_var, *data_seed,
            )
            .target(tempering),
            ModelConfig::GaussCauchy {
                sigma,
                gamma,
                prior_var,
            } => GaussCauchyModel::new(sigma.clone(), gamma.clone(), *prior_var).target(tempering),
        }
    }
}

/// Fixed temperature ladder or a pilot specification that builds one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleConfig {
    Fixed { temperatures: Vec<f64> },
    Pilot { particles: usize, target_ess_fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub struct ProposalConfig {
    #[serde(default = "default_true")]
    pub adapt_active: bool,
    #[serde(default)]
    pub inactive_family: InactiveFamily,
}

fn default_true() -> bool {
    true
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            adapt_active: true,
            inactive_family: InactiveFamily::Prior,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub struct ResampleConfig {
    #[serde(default)]
    pub mode: ResampleMode,
    #[serde(default)]
    pub trigger: ResampleTrigger,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        ResampleConfig {
            mode: ResampleMode::default(),
            trigger: ResampleTrigger::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub struct DumpConfig {
    #[serde(default)]
    pub stage_populations: bool,
    #[serde(default)]
    pub chain: bool,
    #[serde(default)]
    pub spectra: bool,
}

/// One experiment: model, algorithm, sampler sizes, schedule, seeds and
/// repeat count. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub algorithm: Algorithm,
    /// Outer particle count; iteration count for the MH chain.
    pub n_active: usize,
    #[serde(default = "default_n_inactive")]
    pub n_inactive: usize,
    pub schedule: ScheduleConfig,
    #[serde(default = "default_gap_rule")]
    pub gap_rule: GapRule,
    #[serde(default)]
    pub proposals: ProposalConfig,
    #[serde(default)]
    pub resample: ResampleConfig,
    pub seed: u64,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Reference posterior mean for RMSE; zeros when omitted.
    #[serde(default)]
    pub truth: Option<Vec<f64>>,
    #[serde(default = "default_sweeps")]
    pub mcmc_sweeps: usize,
    /// Which estimator feeds the RMSE.
    #[serde(default)]
    pub estimator: EstimatorMode,
    /// Fraction of the MH chain discarded as burn-in.
    #[serde(default = "default_burn_in")]
    pub burn_in_fraction: f64,
    #[serde(default)]
    pub dumps: DumpConfig,
}

fn default_n_inactive() -> usize {
    10
}

fn default_gap_rule() -> GapRule {
    GapRule::LargestGap
}

fn default_repeats() -> usize {
    10
}

fn default_sweeps() -> usize {
    1
}

fn default_burn_in() -> f64 {
    0.1
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_active < 2 {
            return Err(Error::InvalidConfig("n_active must be at least 2".into()));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidConfig("repeats must be positive".into()));
        }
        if let Some(truth) = &self.truth {
            if truth.len() != self.model.dim() {
                return Err(Error::InvalidConfig(format!(
                    "truth has length {}, model dimension is {}",
                    truth.len(),
                    self.model.dim()
                )));
            }
        }
        if let ScheduleConfig::Fixed { temperatures } = &self.schedule {
            TemperingSchedule::new(temperatures.clone())?;
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(Error::InvalidConfig(
                "burn_in_fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    fn smc_settings(&self) -> SmcSettings {
        SmcSettings {
            n_active: self.n_active,
            n_inactive: self.n_inactive,
            resample_mode: self.resample.mode,
            resample_trigger: self.resample.trigger,
            adapt_active: self.proposals.adapt_active,
            inactive_family: self.proposals.inactive_family,
            mcmc_sweeps: self.mcmc_sweeps,
            record_stages: self.dumps.stage_populations,
        }
    }
}

/// Outcome of one repeat.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepeatResult {
    pub run: u64,
    pub posterior_mean_single: Vec<f64>,
    pub posterior_mean_all: Vec<f64>,
    pub log_evidence: f64,
    pub log_evidence_trace: Vec<f64>,
    pub likelihood_evals: u64,
    pub score_evals: u64,
    pub error: Option<String>,
}

/// Aggregated experiment output. Deterministic given the configuration;
/// wall-clock timing goes to a sidecar file instead.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub config: RunConfig,
    pub model_label: String,
    pub schedule: Vec<f64>,
    pub pilot_likelihood_evals: u64,
    pub repeats: Vec<RepeatResult>,
    pub truth: Vec<f64>,
    /// sqrt(mean over successful repeats of squared error) per parameter.
    pub rmse_per_parameter: Vec<f64>,
    /// Mean of the per-parameter RMSEs.
    pub rmse_mean: f64,
}

impl RunResult {
    pub fn write_json<W: Write>(&self, out: &mut W) -> Result<()> {
        serde_json::to_writer_pretty(&mut *out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }
}

/// Resolve the tempering schedule, running the pilot when asked. Returns
/// the schedule and the pilot's likelihood-evaluation count.
pub fn resolve_schedule(config: &RunConfig) -> Result<(TemperingSchedule, u64)> {
    match &config.schedule {
        ScheduleConfig::Fixed { temperatures } => {
            Ok((TemperingSchedule::new(temperatures.clone())?, 0))
        }
        ScheduleConfig::Pilot {
            particles,
            target_ess_fraction,
        } => {
            // The pilot model instance keeps its evaluations out of the
            // per-repeat counters.
            let pilot_model = config
                .model
                .build(Tempering::Annealed(TemperingSchedule::uniform(1)?))?;
            let schedule = pilot_adaptive_schedule(
                &pilot_model,
                *particles,
                *target_ess_fraction,
                config.seed,
                u64::MAX,
            )?;
            Ok((schedule, pilot_model.likelihood_evals()))
        }
    }
}

fn repeat_outcome(run: u64, outcome: Result<SmcRun>) -> (RepeatResult, Option<SmcRun>) {
    match outcome {
        Ok(smc_run) => (
            RepeatResult {
                run,
                posterior_mean_single: smc_run.mean_single.iter().cloned().collect(),
                posterior_mean_all: smc_run.mean_all_points.iter().cloned().collect(),
                log_evidence: smc_run.log_evidence,
                log_evidence_trace: smc_run.log_evidence_trace.clone(),
                likelihood_evals: smc_run.likelihood_evals,
                score_evals: smc_run.score_evals,
                error: None,
            },
            Some(smc_run),
        ),
        Err(e) => (
            RepeatResult {
                run,
                posterior_mean_single: Vec::new(),
                posterior_mean_all: Vec::new(),
                log_evidence: f64::NAN,
                log_evidence_trace: Vec::new(),
                likelihood_evals: 0,
                score_evals: 0,
                error: Some(e.to_string()),
            },
            None,
        ),
    }
}

/// Execute one repeat of the configured algorithm.
pub fn run_single(
    config: &RunConfig,
    schedule: &TemperingSchedule,
    run: u64,
) -> (RepeatResult, Option<SmcRun>) {
    let model = match config.model.build(Tempering::Annealed(schedule.clone())) {
        Ok(m) => m,
        Err(e) => return repeat_outcome(run, Err(e)),
    };
    let settings = config.smc_settings();
    let outcome = match config.algorithm {
        Algorithm::Smc => run_standard_smc(
            &BaselineSettings {
                n_particles: config.n_active,
                resample_mode: config.resample.mode,
                resample_trigger: config.resample.trigger,
                adapt_proposal: config.proposals.adapt_active,
                mcmc_sweeps: config.mcmc_sweeps,
            },
            &model,
            config.seed,
            run,
        ),
        Algorithm::AsSmc => run_assmc(
            &settings,
            &BasisSource::PriorSample(config.gap_rule),
            &model,
            config.seed,
            run,
        ),
        Algorithm::AdaptiveAsSmc => run_adaptive_assmc(
            &settings,
            config.gap_rule,
            AdaptiveBasisMode::Readapt,
            false,
            &model,
            config.seed,
            run,
        ),
        Algorithm::AsSmc2 => run_assmc2(
            &Smc2Settings {
                base: settings,
                ..Smc2Settings::default()
            },
            &BasisSource::PriorSample(config.gap_rule),
            &model,
            config.seed,
            run,
        ),
        Algorithm::AsMh => run_asmh_as_smc_run(config, &model, run),
    };
    repeat_outcome(run, outcome)
}

/// Adapt the MH chain output into the shared run shape: the posterior mean
/// is the post-burn-in chain average (both estimator slots coincide).
fn run_asmh_as_smc_run(config: &RunConfig, model: &TargetModel, run: u64) -> Result<SmcRun> {
    let engine_settings = config.smc_settings();
    let engine = crate::assmc::Engine {
        model,
        settings: &engine_settings,
        seed: config.seed,
        run,
    };
    // The chain estimates its subspace from prior draws like the SMC
    // samplers do.
    let thetas = engine.draw_initial_points();
    let (basis, _) = engine.prior_sample_basis(&thetas, config.gap_rule)?;
    let asmh_run = run_asmh(
        &AsmhConfig {
            iterations: config.n_active,
            n_inactive: config.n_inactive,
            active_cov: None,
        },
        model,
        &basis,
        config.seed,
        run,
    )?;
    let burn = ((asmh_run.chain.len() as f64) * config.burn_in_fraction) as usize;
    let kept = &asmh_run.chain[burn.min(asmh_run.chain.len() - 1)..];
    let dim = model.dim();
    let mut mean = nalgebra::DVector::zeros(dim);
    for sample in kept {
        mean += &sample.theta;
    }
    mean /= kept.len() as f64;
    // Represent the chain as a single-particle population for the shared
    // output shape.
    let last = kept.last().expect("chain is never empty");
    let projected = crate::model::project_prior(model.prior(), &basis)?;
    let ctx = crate::asmh::SamplerContext::new(model, &basis, &projected);
    let mut rng = crate::rng::derive_stream(
        config.seed,
        crate::rng::StreamPath::new(run, 0, 0, crate::rng::Purpose::SelectIndex),
    );
    let cloud = crate::asmh::sample_cloud(
        ctx,
        &basis.project_active(&last.theta),
        &crate::proposal::InactiveProposal::Prior,
        config.n_inactive,
        model.stages(),
        &mut rng,
    )?;
    let particle = crate::assmc::ActiveParticle {
        state: crate::asmh::ActiveState {
            active: basis.project_active(&last.theta),
            cloud,
            selected: 0,
        },
        proposal: crate::proposal::InactiveProposal::Prior,
    };
    Ok(SmcRun {
        mean_single: mean.clone(),
        mean_all_points: mean,
        log_evidence: f64::NEG_INFINITY,
        log_evidence_trace: Vec::new(),
        ess_trace: Vec::new(),
        move_acceptance: vec![(model.stages(), asmh_run.acceptance_rate)],
        spectra: Vec::new(),
        reprojections: Vec::new(),
        final_basis: basis,
        final_population: crate::smc::Population::uniform(vec![particle]),
        stage_dump: Vec::new(),
        likelihood_evals: model.likelihood_evals(),
        score_evals: model.score_evals(),
    })
}

/// Run every repeat, aggregate the RMSE, and assemble the result.
pub fn run_experiment(config: &RunConfig) -> Result<RunResult> {
    config.validate()?;
    let (schedule, pilot_evals) = resolve_schedule(config)?;
    let truth = config
        .truth
        .clone()
        .unwrap_or_else(|| vec![0.0; config.model.dim()]);

    let outcomes: Vec<(RepeatResult, Option<SmcRun>)> = (0..config.repeats as u64)
        .into_par_iter()
        .map(|run| run_single(config, &schedule, run))
        .collect();
    let repeats: Vec<RepeatResult> = outcomes.iter().map(|(r, _)| r.clone()).collect();

    let dim = config.model.dim();
    let mut sq_err = vec![0.0_f64; dim];
    let mut successes = 0usize;
    for repeat in &repeats {
        if repeat.error.is_some() {
            continue;
        }
        successes += 1;
        let estimate = match config.estimator {
            EstimatorMode::SinglePoint => &repeat.posterior_mean_single,
            EstimatorMode::AllPoints => &repeat.posterior_mean_all,
        };
        for j in 0..dim {
            let e = estimate[j] - truth[j];
            sq_err[j] += e * e;
        }
    }
    if successes == 0 {
        return Err(Error::InvalidConfig(
            "every repeat failed; see per-repeat errors".into(),
        ));
    }
    let rmse_per_parameter: Vec<f64> = sq_err
        .iter()
        .map(|&s| (s / successes as f64).sqrt())
        .collect();
    let rmse_mean = rmse_per_parameter.iter().sum::<f64>() / dim as f64;

    let model_label = config
        .model
        .build(Tempering::Annealed(TemperingSchedule::uniform(1)?))?
        .name()
        .to_string();
    Ok(RunResult {
        config: config.clone(),
        model_label,
        schedule: schedule.temperatures().to_vec(),
        pilot_likelihood_evals: pilot_evals,
        repeats,
        truth,
        rmse_per_parameter,
        rmse_mean,
    })
}

/// Run an experiment and write its files under `out_dir`: `results.json`
/// (deterministic), optional trace CSVs, and `timing.json` (wall time;
/// deliberately outside the deterministic result file).
pub fn run_experiment_to_dir(config: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let started = std::time::Instant::now();
    let result = run_experiment(config)?;
    let elapsed = started.elapsed().as_secs_f64();

    let results_path = out_dir.join("results.json");
    let mut file = std::fs::File::create(&results_path)?;
    result.write_json(&mut file)?;

    let mut timing = std::fs::File::create(out_dir.join("timing.json"))?;
    writeln!(timing, "{{\"wall_time_s\": {elapsed}}}")?;

    if config.dumps.spectra || config.dumps.chain || config.dumps.stage_populations {
        let (schedule, _) = resolve_schedule(config)?;
        let (_, smc_run) = run_single(config, &schedule, 0);
        if let Some(smc_run) = smc_run {
            if config.dumps.spectra && !smc_run.spectra.is_empty() {
                let mut f = std::fs::File::create(out_dir.join("spectra.csv"))?;
                write_spectra_csv(&smc_run.spectra, &mut f)?;
            }
            if config.dumps.stage_populations && !smc_run.stage_dump.is_empty() {
                let mut f = std::fs::File::create(out_dir.join("stages.csv"))?;
                write_stage_dump_csv(&smc_run.stage_dump, &mut f)?;
            }
        }
        if config.dumps.chain && config.algorithm == Algorithm::AsMh {
            let model = config.model.build(Tempering::Annealed(schedule.clone()))?;
            let engine_settings = config.smc_settings();
            let engine = crate::assmc::Engine {
                model: &model,
                settings: &engine_settings,
                seed: config.seed,
                run: 0,
            };
            let thetas = engine.draw_initial_points();
            let (basis, _) = engine.prior_sample_basis(&thetas, config.gap_rule)?;
            let chain = run_asmh(
                &AsmhConfig {
                    iterations: config.n_active,
                    n_inactive: config.n_inactive,
                    active_cov: None,
                },
                &model,
                &basis,
                config.seed,
                0,
            )?;
            let mut f = std::fs::File::create(out_dir.join("chain.csv"))?;
            chain.write_chain_csv(&mut f)?;
        }
    }
    Ok(results_path)
}

/// Per-algorithm summary row of a comparison table.
#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub algorithm: String,
    pub model: String,
    pub rmse_min: f64,
    pub rmse_q1: f64,
    pub rmse_median: f64,
    pub rmse_q3: f64,
    pub rmse_max: f64,
    pub rmse_mean: f64,
    pub mean_likelihood_evals: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Summarise result files into comparison rows; all inputs must refer to
/// the same model and truth.
pub fn compare(results: &[RunResult]) -> Result<Vec<CompareRow>> {
    if results.is_empty() {
        return Err(Error::EmptyInput("comparison inputs"));
    }
    let reference = &results[0];
    for r in results.iter().skip(1) {
        if r.model_label != reference.model_label || r.truth != reference.truth {
            return Err(Error::ModelMismatch(
                reference.model_label.clone(),
                r.model_label.clone(),
            ));
        }
    }
    Ok(results
        .iter()
        .map(|r| {
            let mut sorted = r.rmse_per_parameter.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            let evals: Vec<f64> = r
                .repeats
                .iter()
                .filter(|rep| rep.error.is_none())
                .map(|rep| rep.likelihood_evals as f64)
                .collect();
            CompareRow {
                algorithm: r.config.algorithm.label().to_string(),
                model: r.model_label.clone(),
                rmse_min: quantile(&sorted, 0.0),
                rmse_q1: quantile(&sorted, 0.25),
                rmse_median: quantile(&sorted, 0.5),
                rmse_q3: quantile(&sorted, 0.75),
                rmse_max: quantile(&sorted, 1.0),
                rmse_mean: r.rmse_mean,
                mean_likelihood_evals: evals.iter().sum::<f64>() / evals.len().max(1) as f64,
            }
        })
        .collect())
}

/// Write comparison rows as CSV.
pub fn write_compare_csv<W: Write>(rows: &[CompareRow], out: &mut W) -> Result<()> {
    writeln!(
        out,
        "algorithm,model,rmse_min,rmse_q1,rmse_median,rmse_q3,rmse_max,rmse_mean,mean_likelihood_evals"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.algorithm,
            r.model,
            r.rmse_min,
            r.rmse_q1,
            r.rmse_median,
            r.rmse_q3,
            r.rmse_max,
            r.rmse_mean,
            r.mean_likelihood_evals
        )?;
    }
    Ok(())
}
