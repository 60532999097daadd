//! Shared sequential Monte Carlo machinery: weighted populations, effective
//! sample size, stratified and multinomial resampling, tempering schedules
//! (fixed, plus a pilot run that builds one adaptively), and evidence
//! accumulation.

use crate::error::{Error, Result};
use crate::math::{log_sum_exp, normalise_log_weights, weighted_covariance, weighted_mean};
use crate::rng::{derive_stream, Purpose, StreamPath};
use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Annealing temperatures eta_0 = 0 < ... < eta_T = 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TemperingSchedule {
    temperatures: Vec<f64>,
}

impl TemperingSchedule {
    pub fn new(temperatures: Vec<f64>) -> Result<Self> {
        if temperatures.len() < 2 {
            return Err(Error::InvalidSchedule(
                "need at least two temperatures".into(),
            ));
        }
        if temperatures[0] != 0.0 {
            return Err(Error::InvalidSchedule("first temperature must be 0".into()));
        }
        if *temperatures.last().unwrap() != 1.0 {
            return Err(Error::InvalidSchedule("last temperature must be 1".into()));
        }
        if temperatures.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidSchedule(
                "temperatures must be strictly increasing".into(),
            ));
        }
        Ok(TemperingSchedule { temperatures })
    }

    /// Uniformly spaced ladder with `stages` steps.
    pub fn uniform(stages: usize) -> Result<Self> {
        if stages == 0 {
            return Err(Error::InvalidSchedule("need at least one stage".into()));
        }
        let temperatures = (0..=stages).map(|t| t as f64 / stages as f64).collect();
        TemperingSchedule::new(temperatures)
    }

    /// Number of stages T (one fewer than the number of temperatures).
    pub fn stages(&self) -> usize {
        self.temperatures.len() - 1
    }

    pub fn temperature(&self, stage: usize) -> f64 {
        self.temperatures[stage]
    }

    pub fn temperatures(&self) -> &[f64] {
        &self.temperatures
    }
}

impl TryFrom<Vec<f64>> for TemperingSchedule {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        TemperingSchedule::new(v)
    }
}

impl From<TemperingSchedule> for Vec<f64> {
    fn from(s: TemperingSchedule) -> Vec<f64> {
        s.temperatures
    }
}

/// Effective sample size (sum w)^2 / sum w^2 of unnormalised log weights,
/// computed stably in log space. Errors when every weight is zero.
pub fn ess(log_weights: &[f64]) -> Result<f64> {
    let m = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::PopulationDead);
    }
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for &lw in log_weights {
        let w = (lw - m).exp();
        s1 += w;
        s2 += w * w;
    }
    Ok(s1 * s1 / s2)
}

/// Stratified resampling: one uniform per equal-probability stratum,
/// inverted through the cumulative weights. `weights` must be normalised.
pub fn stratified_resample<R: Rng + ?Sized>(
    weights: &[f64],
    n_out: usize,
    rng: &mut R,
) -> Vec<usize> {
    let n = weights.len();
    let mut ancestors = Vec::with_capacity(n_out);
    let mut cursor = 0usize;
    let mut cumulative = weights[0];
    for k in 0..n_out {
        let u = (k as f64 + rng.gen::<f64>()) / n_out as f64;
        while u >= cumulative && cursor + 1 < n {
            cursor += 1;
            cumulative += weights[cursor];
        }
        ancestors.push(cursor);
    }
    ancestors
}

/// One draw from a normalised categorical distribution.
pub fn multinomial_draw<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut cumulative = 0.0;
    for (j, &w) in weights.iter().enumerate() {
        cumulative += w;
        if u < cumulative {
            return j;
        }
    }
    weights.len() - 1
}

/// Multinomial resampling: independent categorical draws per offspring.
pub fn multinomial_resample<R: Rng + ?Sized>(
    weights: &[f64],
    n_out: usize,
    rng: &mut R,
) -> Vec<usize> {
    (0..n_out).map(|_| multinomial_draw(weights, rng)).collect()
}

/// A weighted particle population: payloads plus parallel log weights.
#[derive(Debug, Clone)]
pub struct Population<P> {
    pub particles: Vec<P>,
    pub log_weights: Vec<f64>,
}

impl<P> Population<P> {
    /// Population with uniform weights 1/N.
    pub fn uniform(particles: Vec<P>) -> Self {
        let n = particles.len();
        Population {
            particles,
            log_weights: vec![-(n as f64).ln(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn ess(&self) -> Result<f64> {
        ess(&self.log_weights)
    }

    /// Subtract log-sum-exp so the weights sum to one in linear space.
    pub fn normalise(&mut self) {
        crate::math::normalise_log_weights_in_place(&mut self.log_weights);
    }

    pub fn normalised_weights(&self) -> Vec<f64> {
        normalise_log_weights(&self.log_weights)
    }
}

impl<P: Clone> Population<P> {
    /// Replace the population by the given ancestors with uniform weights.
    pub fn gather(&mut self, ancestors: &[usize]) {
        let particles = ancestors
            .iter()
            .map(|&j| self.particles[j].clone())
            .collect::<Vec<_>>();
        *self = Population::uniform(particles);
    }
}

/// Running evidence estimate: log Z_t accumulates the log of the weighted
/// mean incremental weight at each stage.
#[derive(Debug, Clone, Default)]
pub struct LogEvidence {
    trace: Vec<f64>,
    total: f64,
}

impl LogEvidence {
    pub fn new() -> Self {
        LogEvidence {
            trace: Vec::new(),
            total: 0.0,
        }
    }

    /// Add one stage given the previous normalised log weights and the
    /// per-particle log incremental weights.
    pub fn push_stage(&mut self, prev_normalised_log_w: &[f64], log_increments: &[f64]) -> f64 {
        let combined: Vec<f64> = prev_normalised_log_w
            .iter()
            .zip(log_increments)
            .map(|(&lw, &inc)| lw + inc)
            .collect();
        let step = log_sum_exp(&combined);
        self.total += step;
        self.trace.push(self.total);
        step
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    /// log Z_t after each completed stage.
    pub fn trace(&self) -> &[f64] {
        &self.trace
    }
}

/// Build a tempering schedule from a pilot run of an adaptive SMC sampler
/// on the plain parameter space: at each stage the next temperature is
/// found by bisection so the effective sample size of the incremental
/// weights hits `target_ess_fraction * n`, then the population is
/// resampled and moved by a random-walk MH kernel.
pub fn pilot_adaptive_schedule(
    model: &crate::model::TargetModel,
    n_particles: usize,
    target_ess_fraction: f64,
    master_seed: u64,
    run: u64,
) -> Result<TemperingSchedule> {
    if !(0.0..1.0).contains(&target_ess_fraction) || target_ess_fraction <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "target ESS fraction must lie in (0, 1), got {target_ess_fraction}"
        )));
    }
    if n_particles < 2 {
        return Err(Error::InvalidConfig(
            "pilot needs at least two particles".into(),
        ));
    }
    let dim = model.dim();
    let mut thetas: Vec<DVector<f64>> = Vec::with_capacity(n_particles);
    let mut raws: Vec<f64> = Vec::with_capacity(n_particles);
    for m in 0..n_particles {
        let mut rng = derive_stream(master_seed, StreamPath::new(run, 0, m as u64, Purpose::Pilot));
        let theta = model.sample_prior(&mut rng);
        raws.push(model.log_likelihood(&theta));
        thetas.push(theta);
    }

    let target = target_ess_fraction * n_particles as f64;
    let ess_at = |eta_prev: f64, eta: f64, raws: &[f64]| -> f64 {
        let incr: Vec<f64> = raws.iter().map(|&r| (eta - eta_prev) * r).collect();
        ess(&incr).unwrap_or(1.0)
    };

    let mut temperatures = vec![0.0];
    const MAX_STAGES: usize = 10_000;
    const MOVES_PER_STAGE: usize = 2;
    while *temperatures.last().unwrap() < 1.0 {
        let stage = temperatures.len();
        if stage > MAX_STAGES {
            temperatures.push(1.0);
            break;
        }
        let last = *temperatures.last().unwrap();
        // Bisection on the conditional-ESS criterion; if even eta = 1 keeps
        // the ESS above target (including the non-bracketing case), jump
        // straight to 1.
        let eta = if ess_at(last, 1.0, &raws) >= target {
            1.0
        } else {
            let mut lo = last;
            let mut hi = 1.0;
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if ess_at(last, mid, &raws) >= target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let eta = if eta >= 1.0 - 1e-12 { 1.0 } else { eta };
        temperatures.push(eta);

        // Resample proportionally to the incremental weights.
        let incr: Vec<f64> = raws.iter().map(|&r| (eta - last) * r).collect();
        let weights = normalise_log_weights(&incr);
        let mut rng_res = derive_stream(
            master_seed,
            StreamPath::new(run, stage as u64, 0, Purpose::Pilot).with_substream(1),
        );
        let ancestors = stratified_resample(&weights, n_particles, &mut rng_res);
        thetas = ancestors.iter().map(|&j| thetas[j].clone()).collect();
        raws = ancestors.iter().map(|&j| raws[j]).collect();

        // Random-walk moves targeting p * l^eta with the scaled empirical
        // covariance of the freshly resampled population.
        let uniform = vec![1.0 / n_particles as f64; n_particles];
        let mean = weighted_mean(&thetas, &uniform);
        let mut cov = weighted_covariance(&thetas, &uniform, &mean);
        let trace: f64 = cov.diagonal().sum();
        if !(trace > 0.0) {
            cov = nalgebra::DMatrix::identity(dim, dim);
        } else {
            for j in 0..dim {
                cov[(j, j)] += 1e-10 * trace;
            }
        }
        cov *= 2.38 * 2.38 / dim as f64;
        let proposal = crate::gaussian::Gaussian::full(DVector::zeros(dim), cov)?;
        for m in 0..n_particles {
            let mut rng = derive_stream(
                master_seed,
                StreamPath::new(run, stage as u64, m as u64, Purpose::Pilot).with_substream(2),
            );
            for _ in 0..MOVES_PER_STAGE {
                let step = proposal.sample(&mut rng);
                let candidate = &thetas[m] + step;
                let cand_raw = model.log_likelihood(&candidate);
                let log_alpha = model.log_prior(&candidate) + eta * cand_raw
                    - model.log_prior(&thetas[m])
                    - eta * raws[m];
                if rng.gen::<f64>().ln() < log_alpha {
                    thetas[m] = candidate;
                    raws[m] = cand_raw;
                }
            }
        }
    }
    TemperingSchedule::new(temperatures)
}
