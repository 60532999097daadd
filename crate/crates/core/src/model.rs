//! The target-model abstraction all samplers consume: a Gaussian prior with
//! exact conditionals under any orthonormal split, a factorised (annealed or
//! data-tempered) likelihood with an analytic score, and evaluation
//! counters for cost-matched comparisons.

use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::smc::TemperingSchedule;
use crate::subspace::SubspaceBasis;
use nalgebra::{DMatrix, DVector};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

/// A differentiable log-likelihood, optionally factorised over independent
/// observation blocks for data tempering.
pub trait Likelihood: Send + Sync {
    fn dim(&self) -> usize;

    /// Full log likelihood, including normalising constants (evidence
    /// estimates compare absolute values).
    fn log_full(&self, theta: &DVector<f64>) -> f64;

    /// Gradient of the full log likelihood.
    fn score_full(&self, theta: &DVector<f64>) -> DVector<f64>;

    /// Number of independent factors available for data tempering.
    fn n_factors(&self) -> usize {
        1
    }

    /// Sum of the first `upto` factors' log likelihoods. Implementations
    /// must make `log_prefix(theta, n_factors())` coincide bit-for-bit with
    /// `log_full(theta)`.
    fn log_prefix(&self, theta: &DVector<f64>, upto: usize) -> f64 {
        if upto == 0 {
            0.0
        } else {
            self.log_full(theta)
        }
    }

    /// Gradient of `log_prefix`.
    fn score_prefix(&self, theta: &DVector<f64>, upto: usize) -> DVector<f64> {
        if upto == 0 {
            DVector::zeros(self.dim())
        } else {
            self.score_full(theta)
        }
    }
}

/// How the likelihood is bridged from the prior to the posterior.
#[derive(Debug, Clone)]
pub enum Tempering {
    /// Targets p * l^eta_t along a fixed temperature ladder.
    Annealed(TemperingSchedule),
    /// Targets p * l_{1:t} where the factors are contiguous observation
    /// blocks; `boundaries[t]` is the number of factors used at stage t.
    DataBlocks { boundaries: Vec<usize> },
}

impl Tempering {
    pub fn data_blocks(n_factors: usize, n_stages: usize) -> Result<Self> {
        if n_stages == 0 || n_stages > n_factors {
            return Err(Error::InvalidConfig(format!(
                "cannot split {n_factors} factors into {n_stages} stages"
            )));
        }
        let mut boundaries = Vec::with_capacity(n_stages + 1);
        for t in 0..=n_stages {
            boundaries.push(t * n_factors / n_stages);
        }
        Ok(Tempering::DataBlocks { boundaries })
    }

    pub fn stages(&self) -> usize {
        match self {
            Tempering::Annealed(schedule) => schedule.stages(),
            Tempering::DataBlocks { boundaries } => boundaries.len() - 1,
        }
    }
}

/// Per-point cache of everything needed to evaluate tempered likelihoods at
/// any stage without re-touching the model.
#[derive(Debug, Clone)]
pub enum LikelihoodCache {
    Annealed { raw: f64 },
    Blocks { prefix: Vec<f64> },
}

/// Prior, factorised likelihood and score; the single abstraction every
/// sampler consumes.
#[derive(Clone)]
pub struct TargetModel {
    name: String,
    prior: Gaussian,
    likelihood: Arc<dyn Likelihood>,
    tempering: Tempering,
    likelihood_evals: Arc<AtomicU64>,
    score_evals: Arc<AtomicU64>,
}

impl TargetModel {
    pub fn new(
        name: impl Into<String>,
        prior: Gaussian,
        likelihood: Arc<dyn Likelihood>,
        tempering: Tempering,
    ) -> Result<Self> {
        if prior.dim() != likelihood.dim() {
            return Err(Error::DimensionMismatch {
                expected: likelihood.dim(),
                got: prior.dim(),
            });
        }
        if let Tempering::DataBlocks { boundaries } = &tempering {
            if boundaries.last() != Some(&likelihood.n_factors()) {
                return Err(Error::InvalidConfig(
                    "data-tempering boundaries do not cover all factors".into(),
                ));
            }
        }
        Ok(TargetModel {
            name: name.into(),
            prior,
            likelihood,
            tempering,
            likelihood_evals: Arc::new(AtomicU64::new(0)),
            score_evals: Arc::new(AtomicU64::new(0)),
        })
    }

    /// Same model with zeroed evaluation counters; used to give each
    /// repeat of an experiment its own cost accounting.
    pub fn fresh(&self) -> TargetModel {
        TargetModel {
            name: self.name.clone(),
            prior: self.prior.clone(),
            likelihood: Arc::clone(&self.likelihood),
            tempering: self.tempering.clone(),
            likelihood_evals: Arc::new(AtomicU64::new(0)),
            score_evals: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Same model under a different tempering scheme.
    pub fn with_tempering(&self, tempering: Tempering) -> Result<TargetModel> {
        TargetModel::new(
            self.name.clone(),
            self.prior.clone(),
            Arc::clone(&self.likelihood),
            tempering,
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn prior(&self) -> &Gaussian {
        &self.prior
    }

    pub fn tempering(&self) -> &Tempering {
        &self.tempering
    }

    pub fn stages(&self) -> usize {
        self.tempering.stages()
    }

    pub fn likelihood_evals(&self) -> u64 {
        self.likelihood_evals.load(Ordering::Relaxed)
    }

    pub fn score_evals(&self) -> u64 {
        self.score_evals.load(Ordering::Relaxed)
    }

    pub fn log_prior(&self, theta: &DVector<f64>) -> f64 {
        self.prior.log_density(theta)
    }

    pub fn sample_prior<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        self.prior.sample(rng)
    }

    /// Full untempered log likelihood. Counts one evaluation.
    pub fn log_likelihood(&self, theta: &DVector<f64>) -> f64 {
        self.likelihood_evals.fetch_add(1, Ordering::Relaxed);
        self.likelihood.log_full(theta)
    }

    /// Everything needed to evaluate this point at any stage. Counts one
    /// evaluation.
    pub fn likelihood_cache(&self, theta: &DVector<f64>) -> LikelihoodCache {
        self.likelihood_evals.fetch_add(1, Ordering::Relaxed);
        match &self.tempering {
            Tempering::Annealed(_) => LikelihoodCache::Annealed {
                raw: self.likelihood.log_full(theta),
            },
            Tempering::DataBlocks { boundaries } => {
                let prefix = boundaries
                    .iter()
                    .map(|&b| self.likelihood.log_prefix(theta, b))
                    .collect();
                LikelihoodCache::Blocks { prefix }
            }
        }
    }

    /// log l_{1:stage} from a cache; free of model evaluations.
    pub fn log_l_upto_cached(&self, cache: &LikelihoodCache, stage: usize) -> f64 {
        match (cache, &self.tempering) {
            (LikelihoodCache::Annealed { raw }, Tempering::Annealed(schedule)) => {
                if stage == 0 {
                    0.0
                } else {
                    schedule.temperature(stage) * raw
                }
            }
            (LikelihoodCache::Blocks { prefix }, _) => prefix[stage],
            _ => unreachable!("cache kind follows the model's tempering"),
        }
    }

    /// log l_{1:stage}(theta). Counts one evaluation (none for stage 0).
    pub fn log_l_upto(&self, theta: &DVector<f64>, stage: usize) -> Result<f64> {
        let stages = self.stages();
        if stage > stages {
            return Err(Error::StageOutOfRange { stage, stages });
        }
        if stage == 0 {
            return Ok(0.0);
        }
        let cache = self.likelihood_cache(theta);
        Ok(self.log_l_upto_cached(&cache, stage))
    }

    /// log l_stage(theta) = log l_{1:stage} - log l_{1:stage-1} from a cache.
    pub fn log_l_stage_cached(&self, cache: &LikelihoodCache, stage: usize) -> f64 {
        self.log_l_upto_cached(cache, stage) - self.log_l_upto_cached(cache, stage - 1)
    }

    /// Gradient of log l_{1:stage}. Counts one score evaluation.
    pub fn score_upto(&self, theta: &DVector<f64>, stage: usize) -> Result<DVector<f64>> {
        let stages = self.stages();
        if stage > stages {
            return Err(Error::StageOutOfRange { stage, stages });
        }
        if stage == 0 {
            return Ok(DVector::zeros(self.dim()));
        }
        self.score_evals.fetch_add(1, Ordering::Relaxed);
        match &self.tempering {
            Tempering::Annealed(schedule) => {
                let eta = schedule.temperature(stage);
                Ok(self.likelihood.score_full(theta) * eta)
            }
            Tempering::DataBlocks { boundaries } => {
                Ok(self.likelihood.score_prefix(theta, boundaries[stage]))
            }
        }
    }

    /// Gradient of the full log likelihood. Counts one score evaluation.
    pub fn score(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.score_evals.fetch_add(1, Ordering::Relaxed);
        self.likelihood.score_full(theta)
    }
}

impl std::fmt::Debug for TargetModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TargetModel")
            .field("name", &self.name)
            .field("dim", &self.dim())
            .field("stages", &self.stages())
            .finish()
    }
}

/// Conditional law of the inactive coordinates given the active ones.
#[derive(Debug, Clone)]
enum Conditional {
    /// Independent of the active coordinates (isotropic priors, or any
    /// prior when the split is along its eigen-directions).
    Constant(Gaussian),
    /// Affine Gaussian map a -> N(base + gain a, cov).
    Affine {
        base: DVector<f64>,
        gain: DMatrix<f64>,
        noise: Gaussian,
    },
}

/// Exact factorisation of a Gaussian prior over an orthonormal split:
/// marginal on the active coordinates, conditional on the inactive ones.
#[derive(Debug, Clone)]
pub struct ProjectedPrior {
    marginal_active: Gaussian,
    conditional: Conditional,
}

/// Factorise `prior` along `basis`. Plain Gaussian algebra: rotate the
/// covariance into the basis, take the Schur complement for the
/// conditional. There is no Jacobian because the change of variables is
/// orthonormal.
pub fn project_prior(prior: &Gaussian, basis: &SubspaceBasis) -> Result<ProjectedPrior> {
    if prior.dim() != basis.dim() {
        return Err(Error::DimensionMismatch {
            expected: basis.dim(),
            got: prior.dim(),
        });
    }
    let d_i = basis.inactive_dim();
    let mean_active = basis.project_active(prior.mean());
    let mean_inactive = basis.project_inactive(prior.mean());

    if let Some(var) = prior.isotropic_variance() {
        // Isotropic covariance is invariant under rotation: marginal and
        // conditional are exact and the conditional does not depend on a.
        return Ok(ProjectedPrior {
            marginal_active: Gaussian::isotropic(mean_active, var)?,
            conditional: Conditional::Constant(Gaussian::isotropic(mean_inactive, var)?),
        });
    }

    let sigma = prior.covariance();
    let a = basis.active_matrix();
    let cov_aa = a.tr_mul(&(&sigma * a));
    if d_i == 0 {
        return Ok(ProjectedPrior {
            marginal_active: Gaussian::full(mean_active, symmetrise(cov_aa))?,
            conditional: Conditional::Constant(Gaussian::isotropic(DVector::zeros(0), 1.0)?),
        });
    }
    let i = basis.inactive_matrix();
    let cov_ii = i.tr_mul(&(&sigma * i));
    let cov_ia = i.tr_mul(&(&sigma * a));

    let chol_aa =
        nalgebra::Cholesky::new(symmetrise(cov_aa.clone())).ok_or(Error::NotPositiveDefinite)?;
    // gain = cov_ia * cov_aa^{-1}
    let gain = chol_aa.solve(&cov_ia.transpose()).transpose();
    let cond_cov = symmetrise(&cov_ii - &gain * cov_ia.transpose());
    let base = &mean_inactive - &gain * &mean_active;

    Ok(ProjectedPrior {
        marginal_active: Gaussian::full(mean_active, symmetrise(cov_aa))?,
        conditional: Conditional::Affine {
            base,
            gain,
            noise: Gaussian::full(DVector::zeros(d_i), cond_cov)?,
        },
    })
}

impl ProjectedPrior {
    pub fn marginal_active(&self) -> &Gaussian {
        &self.marginal_active
    }

    pub fn active_dim(&self) -> usize {
        self.marginal_active.dim()
    }

    pub fn inactive_dim(&self) -> usize {
        match &self.conditional {
            Conditional::Constant(g) => g.dim(),
            Conditional::Affine { noise, .. } => noise.dim(),
        }
    }

    pub fn log_active(&self, active: &DVector<f64>) -> f64 {
        self.marginal_active.log_density(active)
    }

    pub fn log_inactive(&self, inactive: &DVector<f64>, active: &DVector<f64>) -> f64 {
        match &self.conditional {
            Conditional::Constant(g) => g.log_density(inactive),
            Conditional::Affine { base, gain, noise } => {
                let residual = inactive - (base + gain * active);
                noise.log_density(&residual)
            }
        }
    }

    pub fn sample_inactive<R: rand::Rng + ?Sized>(
        &self,
        active: &DVector<f64>,
        rng: &mut R,
    ) -> DVector<f64> {
        match &self.conditional {
            Conditional::Constant(g) => g.sample(rng),
            Conditional::Affine { base, gain, noise } => base + gain * active + noise.sample(rng),
        }
    }

    /// Mean of the conditional at a given active point.
    pub fn conditional_mean(&self, active: &DVector<f64>) -> DVector<f64> {
        match &self.conditional {
            Conditional::Constant(g) => g.mean().clone(),
            Conditional::Affine { base, gain, .. } => base + gain * active,
        }
    }

    /// Covariance of the conditional (constant in the active point).
    pub fn conditional_covariance(&self) -> DMatrix<f64> {
        match &self.conditional {
            Conditional::Constant(g) => g.covariance(),
            Conditional::Affine { noise, .. } => noise.covariance(),
        }
    }
}

fn symmetrise(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    for r in 0..n {
        for c in (r + 1)..n {
            let v = 0.5 * (m[(r, c)] + m[(c, r)]);
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_stream, Purpose, StreamPath};
    use crate::subspace::{eigendecompose, split_basis, GapRule, Spectrum};

    fn rotation_basis_2d(angle: f64) -> SubspaceBasis {
        let (s, c) = angle.sin_cos();
        let active = DMatrix::from_column_slice(2, 1, &[c, s]);
        let inactive = DMatrix::from_column_slice(2, 1, &[-s, c]);
        let spectrum = Spectrum {
            eigenvalues: DVector::from_vec(vec![1.0, 0.0]),
            eigenvectors: DMatrix::identity(2, 2),
        };
        SubspaceBasis::new(active, inactive, spectrum).unwrap()
    }

    #[test]
    fn isotropic_projection_is_rotation_invariant() {
        let prior = Gaussian::isotropic(DVector::zeros(2), 3.0).unwrap();
        let basis = rotation_basis_2d(0.7);
        let pp = project_prior(&prior, &basis).unwrap();
        assert_eq!(pp.marginal_active().isotropic_variance(), Some(3.0));
        let a = DVector::from_vec(vec![5.0]);
        let b = DVector::from_vec(vec![-2.0]);
        let i = DVector::from_vec(vec![0.4]);
        // Conditional independent of a.
        assert_eq!(pp.log_inactive(&i, &a), pp.log_inactive(&i, &b));
    }

    #[test]
    fn diagonal_projection_on_axis_basis() {
        // d = 2, cov diag(1, 4), active = e1: conditional is N(0, 4) for all a.
        let prior = Gaussian::full(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 4.0]),
        )
        .unwrap();
        let basis = rotation_basis_2d(0.0);
        let pp = project_prior(&prior, &basis).unwrap();
        let i = DVector::from_vec(vec![1.5]);
        let expect = Gaussian::isotropic(DVector::zeros(1), 4.0)
            .unwrap()
            .log_density(&i);
        for a in [-3.0, 0.0, 2.0] {
            let got = pp.log_inactive(&i, &DVector::from_vec(vec![a]));
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn projected_density_reconstructs_prior() {
        // General SPD covariance, eigen-derived basis: p_a(A^T x) p_i(I^T x | A^T x) = p(x).
        let cov = DMatrix::from_row_slice(
            3,
            3,
            &[2.0, 0.3, -0.4, 0.3, 1.5, 0.2, -0.4, 0.2, 1.0],
        );
        let mean = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let prior = Gaussian::full(mean, cov).unwrap();
        let probe = DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.2, 0.1, 0.2, 0.8, -0.3, 0.1, -0.3, 1.4],
        );
        let spectrum = eigendecompose(&probe).unwrap();
        for d_a in 1..=2usize {
            let basis = split_basis(&spectrum, GapRule::Fixed(d_a)).unwrap();
            let pp = project_prior(&prior, &basis).unwrap();
            let theta = DVector::from_vec(vec![0.3, 1.1, -0.7]);
            let a = basis.project_active(&theta);
            let i = basis.project_inactive(&theta);
            let joint = pp.log_active(&a) + pp.log_inactive(&i, &a);
            assert!(
                (joint - prior.log_density(&theta)).abs() < 1e-8,
                "d_a = {d_a}: {joint} vs {}",
                prior.log_density(&theta)
            );
        }
    }

    #[test]
    fn conditional_matches_monte_carlo_moments() {
        // Sample the prior, project, and compare conditional mean/cov against
        // the affine map by regression-style moments.
        let cov = DMatrix::from_row_slice(
            3,
            3,
            &[2.0, 0.6, -0.5, 0.6, 1.2, 0.3, -0.5, 0.3, 0.9],
        );
        let prior = Gaussian::full(DVector::zeros(3), cov).unwrap();
        let probe = DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.4, 0.0, 0.4, 1.0, 0.2, 0.0, 0.2, 1.0],
        );
        let basis = split_basis(&eigendecompose(&probe).unwrap(), GapRule::Fixed(1)).unwrap();
        let pp = project_prior(&prior, &basis).unwrap();

        let mut rng = derive_stream(3, StreamPath::new(0, 0, 0, Purpose::PriorInit));
        let n = 400_000usize;
        // Accumulate moments of (a, residual) where residual = i - cond_mean(a).
        let mut resid_sum = DVector::zeros(2);
        let mut resid_sq = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let theta = prior.sample(&mut rng);
            let a = basis.project_active(&theta);
            let i = basis.project_inactive(&theta);
            let r = &i - pp.conditional_mean(&a);
            resid_sum += &r;
            resid_sq.ger(1.0, &r, &r, 1.0);
        }
        let mean_r = resid_sum / n as f64;
        let cov_r = resid_sq / n as f64;
        let cond_cov = pp.conditional_covariance();
        // Residual mean should vanish and residual covariance should match
        // the Schur complement; 3-sigma Monte Carlo tolerances.
        for k in 0..2 {
            let se = (cond_cov[(k, k)] / n as f64).sqrt();
            assert!(mean_r[k].abs() < 3.5 * se, "residual mean {k}: {}", mean_r[k]);
        }
        for r in 0..2 {
            for c in 0..2 {
                let scale = (cond_cov[(r, r)] * cond_cov[(c, c)]).sqrt();
                let se = 2.0 * scale / (n as f64).sqrt();
                assert!(
                    (cov_r[(r, c)] - cond_cov[(r, c)]).abs() < 3.5 * se,
                    "residual cov ({r},{c}): {} vs {}",
                    cov_r[(r, c)],
                    cond_cov[(r, c)]
                );
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let prior = Gaussian::isotropic(DVector::zeros(3), 1.0).unwrap();
        let basis = rotation_basis_2d(0.3);
        assert!(matches!(
            project_prior(&prior, &basis),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
