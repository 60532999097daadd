//! Pseudo-marginal Metropolis-Hastings on the active coordinates, with an
//! importance-sampling estimate of the marginal likelihood over the
//! inactive coordinates. The same kernel drives the standalone chain and
//! the move step of the SMC samplers.

use crate::error::{Error, Result};
use crate::math::{log_sum_exp, normalise_log_weights};
use crate::model::{LikelihoodCache, ProjectedPrior, TargetModel};
use crate::proposal::{ActiveProposal, InactiveProposal};
use crate::rng::{derive_stream, Purpose, StreamPath};
use crate::smc::multinomial_draw;
use crate::subspace::SubspaceBasis;
use nalgebra::DVector;
use rand::Rng;
use std::io::Write;

/// Model, basis and projected prior bundled together; every sampler
/// operation reads these and nothing else.
#[derive(Clone, Copy)]
pub struct SamplerContext<'a> {
    pub model: &'a TargetModel,
    pub basis: &'a SubspaceBasis,
    pub projected: &'a ProjectedPrior,
}

impl<'a> SamplerContext<'a> {
    pub fn new(
        model: &'a TargetModel,
        basis: &'a SubspaceBasis,
        projected: &'a ProjectedPrior,
    ) -> Self {
        SamplerContext {
            model,
            basis,
            projected,
        }
    }

    /// Number of stored inactive points: one dimension-zero placeholder
    /// when there is no inactive subspace, so that an exact likelihood
    /// evaluation flows through the same bookkeeping as an estimate.
    pub fn effective_n_inactive(&self, n_inactive: usize) -> usize {
        if self.basis.inactive_dim() == 0 {
            1
        } else {
            n_inactive.max(1)
        }
    }
}

/// The inactive-point cloud attached to one active point: points, their
/// unnormalised log weights at the current stage, and cached likelihood
/// evaluations so retempering costs nothing.
#[derive(Debug, Clone)]
pub struct InnerCloud {
    pub points: Vec<DVector<f64>>,
    pub log_wtilde: Vec<f64>,
    pub caches: Vec<LikelihoodCache>,
}

impl InnerCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// log sum of the unnormalised inner weights.
    pub fn log_sum_wtilde(&self) -> f64 {
        log_sum_exp(&self.log_wtilde)
    }

    /// log of the importance-sampling estimate (1/N_i) sum w-tilde.
    pub fn log_estimate(&self) -> f64 {
        self.log_sum_wtilde() - (self.len() as f64).ln()
    }

    pub fn normalised_weights(&self) -> Vec<f64> {
        normalise_log_weights(&self.log_wtilde)
    }
}

/// One active point with its cloud and the selected inner index.
#[derive(Debug, Clone)]
pub struct ActiveState {
    pub active: DVector<f64>,
    pub cloud: InnerCloud,
    pub selected: usize,
}

impl ActiveState {
    /// The represented point: theta = A a + I i^(selected).
    pub fn reconstructed(&self, basis: &SubspaceBasis) -> DVector<f64> {
        basis.reconstruct(&self.active, &self.cloud.points[self.selected])
    }
}

/// Draw a fresh cloud at `active` and weight it for stage `stage` under
/// proposal `q_inactive`. With no inactive subspace this returns the exact
/// likelihood as a single placeholder weight.
pub fn sample_cloud<R: Rng + ?Sized>(
    ctx: SamplerContext,
    active: &DVector<f64>,
    q_inactive: &InactiveProposal,
    n_inactive: usize,
    stage: usize,
    rng: &mut R,
) -> Result<InnerCloud> {
    let n = ctx.effective_n_inactive(n_inactive);
    if ctx.basis.inactive_dim() == 0 {
        let theta = ctx.basis.reconstruct(active, &DVector::zeros(0));
        let cache = ctx.model.likelihood_cache(&theta);
        let log_l = ctx.model.log_l_upto_cached(&cache, stage);
        return Ok(InnerCloud {
            points: vec![DVector::zeros(0)],
            log_wtilde: vec![log_l],
            caches: vec![cache],
        });
    }
    let mut points = Vec::with_capacity(n);
    let mut log_wtilde = Vec::with_capacity(n);
    let mut caches = Vec::with_capacity(n);
    for _ in 0..n {
        let point = q_inactive.sample(ctx.projected, active, rng);
        let log_q = q_inactive.log_density(ctx.projected, &point, active);
        if log_q == f64::NEG_INFINITY {
            return Err(Error::InvalidProposalSupport);
        }
        let theta = ctx.basis.reconstruct(active, &point);
        let cache = ctx.model.likelihood_cache(&theta);
        let log_p = ctx.projected.log_inactive(&point, active);
        log_wtilde.push(log_p + ctx.model.log_l_upto_cached(&cache, stage) - log_q);
        points.push(point);
        caches.push(cache);
    }
    Ok(InnerCloud {
        points,
        log_wtilde,
        caches,
    })
}

/// Recompute the unnormalised inner weights of stored points for a given
/// stage and proposal, using the cached likelihood evaluations.
pub fn reweight_cloud(
    ctx: SamplerContext,
    active: &DVector<f64>,
    cloud: &InnerCloud,
    q_inactive: &InactiveProposal,
    stage: usize,
) -> Vec<f64> {
    if ctx.basis.inactive_dim() == 0 {
        return vec![ctx.model.log_l_upto_cached(&cloud.caches[0], stage)];
    }
    cloud
        .points
        .iter()
        .zip(&cloud.caches)
        .map(|(point, cache)| {
            ctx.projected.log_inactive(point, active)
                + ctx.model.log_l_upto_cached(cache, stage)
                - q_inactive.log_density(ctx.projected, point, active)
        })
        .collect()
}

/// Unbiased importance-sampling estimate of the stage-t marginal
/// likelihood at `active`: returns the log estimate and the cloud behind it.
pub fn is_marginal_likelihood<R: Rng + ?Sized>(
    ctx: SamplerContext,
    active: &DVector<f64>,
    q_inactive: &InactiveProposal,
    n_inactive: usize,
    stage: usize,
    rng: &mut R,
) -> Result<(f64, InnerCloud)> {
    let cloud = sample_cloud(ctx, active, q_inactive, n_inactive, stage, rng)?;
    Ok((cloud.log_estimate(), cloud))
}

/// One pseudo-marginal MH step targeting the stage-t posterior on the
/// extended space. Returns the new state and whether the proposal was
/// accepted. On rejection the entire tuple (active point, cloud, selected
/// index, estimate) is retained; the retained weights keep serving as the
/// denominator estimate.
pub fn asmh_step<R: Rng + ?Sized>(
    state: &mut ActiveState,
    stage: usize,
    q_active: &ActiveProposal,
    q_inactive: &InactiveProposal,
    ctx: SamplerContext,
    rng: &mut R,
) -> Result<bool> {
    let proposed_active = q_active.propose(&state.active, rng);
    let proposed_cloud = sample_cloud(
        ctx,
        &proposed_active,
        q_inactive,
        state.cloud.len(),
        stage,
        rng,
    )?;
    let proposed_selected = if ctx.basis.inactive_dim() == 0 {
        0
    } else {
        multinomial_draw(&proposed_cloud.normalised_weights(), rng)
    };

    let log_num = ctx.projected.log_active(&proposed_active) + proposed_cloud.log_estimate();
    let log_den = ctx.projected.log_active(&state.active) + state.cloud.log_estimate();
    let hastings = q_active.log_density(&proposed_active, &state.active)
        - q_active.log_density(&state.active, &proposed_active);
    let log_alpha = log_num - log_den + hastings;
    if log_alpha.is_nan() {
        return Err(Error::NonFiniteAcceptance);
    }

    let accept = rng.gen::<f64>().ln() < log_alpha;
    if accept {
        state.active = proposed_active;
        state.cloud = proposed_cloud;
        state.selected = proposed_selected;
    }
    Ok(accept)
}

/// Configuration of a standalone AS-MH chain.
#[derive(Debug, Clone)]
pub struct AsmhConfig {
    pub iterations: usize,
    pub n_inactive: usize,
    /// Random-walk covariance; defaults to 2.38^2/d_a times the prior
    /// marginal covariance of the active coordinates.
    pub active_cov: Option<nalgebra::DMatrix<f64>>,
}

/// One recorded chain state.
#[derive(Debug, Clone)]
pub struct ChainSample {
    pub active: DVector<f64>,
    pub theta: DVector<f64>,
    pub log_estimate: f64,
    pub accepted: bool,
}

/// A finished AS-MH run.
#[derive(Debug)]
pub struct AsmhRun {
    pub chain: Vec<ChainSample>,
    pub acceptance_rate: f64,
}

impl AsmhRun {
    /// Chain dump: iteration, active coordinates, represented point,
    /// log estimate, accepted flag.
    pub fn write_chain_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        if self.chain.is_empty() {
            return Ok(());
        }
        let d_a = self.chain[0].active.len();
        let d = self.chain[0].theta.len();
        let mut header = String::from("iteration");
        for j in 0..d_a {
            header.push_str(&format!(",a{j}"));
        }
        for j in 0..d {
            header.push_str(&format!(",theta{j}"));
        }
        header.push_str(",log_estimate,accepted");
        writeln!(out, "{header}")?;
        for (it, s) in self.chain.iter().enumerate() {
            let mut row = it.to_string();
            for v in s.active.iter() {
                row.push_str(&format!(",{v}"));
            }
            for v in s.theta.iter() {
                row.push_str(&format!(",{v}"));
            }
            row.push_str(&format!(",{},{}", s.log_estimate, u8::from(s.accepted)));
            writeln!(out, "{row}")?;
        }
        Ok(())
    }
}

/// Run a full AS-MH chain targeting the posterior (final tempering stage).
/// The initial active point is the projection of a prior draw; the initial
/// cloud is drawn from the inactive proposal.
pub fn run_asmh(
    config: &AsmhConfig,
    model: &TargetModel,
    basis: &SubspaceBasis,
    master_seed: u64,
    run: u64,
) -> Result<AsmhRun> {
    let projected = crate::model::project_prior(model.prior(), basis)?;
    let ctx = SamplerContext::new(model, basis, &projected);
    let stage = model.stages();
    let q_inactive = InactiveProposal::Prior;
    let q_active = match &config.active_cov {
        Some(cov) => ActiveProposal::from_covariance(cov.clone())?,
        None => ActiveProposal::default_for(&projected)?,
    };

    let mut rng_init = derive_stream(master_seed, StreamPath::new(run, 0, 0, Purpose::PriorInit));
    let theta0 = model.sample_prior(&mut rng_init);
    let active0 = basis.project_active(&theta0);
    let cloud0 = sample_cloud(
        ctx,
        &active0,
        &q_inactive,
        config.n_inactive,
        stage,
        &mut rng_init,
    )?;
    let selected0 = if basis.inactive_dim() == 0 {
        0
    } else {
        multinomial_draw(&cloud0.normalised_weights(), &mut rng_init)
    };
    let mut state = ActiveState {
        active: active0,
        cloud: cloud0,
        selected: selected0,
    };

    let mut chain = Vec::with_capacity(config.iterations + 1);
    chain.push(ChainSample {
        active: state.active.clone(),
        theta: state.reconstructed(basis),
        log_estimate: state.cloud.log_estimate(),
        accepted: false,
    });
    let mut accepted_count = 0usize;
    for it in 0..config.iterations {
        let mut rng = derive_stream(
            master_seed,
            StreamPath::new(run, it as u64 + 1, 0, Purpose::Move),
        );
        let accepted = asmh_step(&mut state, stage, &q_active, &q_inactive, ctx, &mut rng)?;
        accepted_count += usize::from(accepted);
        chain.push(ChainSample {
            active: state.active.clone(),
            theta: state.reconstructed(basis),
            log_estimate: state.cloud.log_estimate(),
            accepted,
        });
    }
    let acceptance_rate = if config.iterations == 0 {
        0.0
    } else {
        accepted_count as f64 / config.iterations as f64
    };
    Ok(AsmhRun {
        chain,
        acceptance_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::project_prior;
    use crate::smc::TemperingSchedule;
    use crate::subspace::{eigendecompose, split_basis, GapRule};
    use crate::toymodels::PlaneModel;
    use nalgebra::DMatrix;

    fn plane_setup(dim: usize) -> (TargetModel, SubspaceBasis) {
        let model = PlaneModel::with_synthetic_data(dim, 10, 50.0, 41);
        let target = model
            .target(crate::model::Tempering::Annealed(
                TemperingSchedule::uniform(2).unwrap(),
            ))
            .unwrap();
        // Exact active direction of the plane model: the normalised ones
        // vector, from the analytic rank-one score matrix.
        let ones = DVector::from_element(dim, 1.0 / (dim as f64).sqrt());
        let m = &ones * ones.transpose();
        let basis = split_basis(&eigendecompose(&m).unwrap(), GapRule::Fixed(1)).unwrap();
        (target, basis)
    }

    #[test]
    fn exact_subspace_estimate_has_zero_variance() {
        // The plane likelihood is constant along the inactive directions, so
        // the estimator equals the likelihood at the ridge exactly for any
        // draw of the inner points.
        let (target, basis) = plane_setup(3);
        let projected = project_prior(target.prior(), &basis).unwrap();
        let ctx = SamplerContext::new(&target, &basis, &projected);
        let active = DVector::from_vec(vec![0.7]);
        let stage = target.stages();
        let ridge = basis.reconstruct(&active, &DVector::zeros(2));
        let expect = target.log_l_upto(&ridge, stage).unwrap();
        let mut values = Vec::new();
        for tag in 0..5 {
            let mut rng = derive_stream(tag, StreamPath::new(0, 0, 0, Purpose::Move));
            let (est, _) = is_marginal_likelihood(
                ctx,
                &active,
                &InactiveProposal::Prior,
                6,
                stage,
                &mut rng,
            )
            .unwrap();
            values.push(est);
        }
        for v in values {
            assert!((v - expect).abs() < 1e-9, "{v} vs {expect}");
        }
    }

    #[test]
    fn single_sample_estimate_is_the_evaluated_point() {
        let (target, basis) = plane_setup(3);
        let projected = project_prior(target.prior(), &basis).unwrap();
        let ctx = SamplerContext::new(&target, &basis, &projected);
        let active = DVector::from_vec(vec![-0.4]);
        let stage = target.stages();
        let mut rng = derive_stream(3, StreamPath::new(0, 0, 0, Purpose::Move));
        let (est, cloud) =
            is_marginal_likelihood(ctx, &active, &InactiveProposal::Prior, 1, stage, &mut rng)
                .unwrap();
        let theta = basis.reconstruct(&active, &cloud.points[0]);
        let expect = target.log_l_upto(&theta, stage).unwrap();
        assert!((est - expect).abs() < 1e-12);
    }

    #[test]
    fn no_inactive_dims_gives_exact_likelihood() {
        let (target, _) = plane_setup(2);
        let basis = SubspaceBasis::identity(2);
        let projected = project_prior(target.prior(), &basis).unwrap();
        let ctx = SamplerContext::new(&target, &basis, &projected);
        let active = DVector::from_vec(vec![0.3, -1.0]);
        let stage = target.stages();
        let mut rng = derive_stream(4, StreamPath::new(0, 0, 0, Purpose::Move));
        let (est, cloud) =
            is_marginal_likelihood(ctx, &active, &InactiveProposal::Prior, 9, stage, &mut rng)
                .unwrap();
        assert_eq!(cloud.len(), 1);
        assert_eq!(cloud.points[0].len(), 0);
        let expect = target.log_l_upto(&active, stage).unwrap();
        assert_eq!(est, expect);
    }

    #[test]
    fn flat_likelihood_acceptance_is_prior_ratio() {
        // At stage 0 the tempered likelihood is flat, so the acceptance
        // ratio reduces to the prior marginal ratio; run many steps and
        // verify the chain matches direct-prior acceptance decisions.
        let (target, basis) = plane_setup(3);
        let projected = project_prior(target.prior(), &basis).unwrap();
        let ctx = SamplerContext::new(&target, &basis, &projected);
        let q_active = ActiveProposal::default_for(&projected).unwrap();
        let mut rng = derive_stream(5, StreamPath::new(0, 0, 0, Purpose::PriorInit));
        let cloud = sample_cloud(ctx, &DVector::from_vec(vec![0.2]), &InactiveProposal::Prior, 4, 0, &mut rng).unwrap();
        let mut state = ActiveState {
            active: DVector::from_vec(vec![0.2]),
            cloud,
            selected: 0,
        };
        for it in 0..200 {
            let mut rng_step = derive_stream(6, StreamPath::new(0, it, 0, Purpose::Move));
            let before = state.active.clone();
            // Replay the step manually to predict the decision.
            let proposed = q_active.propose(&before, &mut rng_step);
            let _cloud = sample_cloud(ctx, &proposed, &InactiveProposal::Prior, 4, 0, &mut rng_step).unwrap();
            let _u = multinomial_draw(
                &crate::math::normalise_log_weights(&_cloud.log_wtilde),
                &mut rng_step,
            );
            let log_alpha =
                ctx.projected.log_active(&proposed) - ctx.projected.log_active(&before);
            let expect_accept = rand::Rng::gen::<f64>(&mut rng_step).ln() < log_alpha;

            let mut rng_step = derive_stream(6, StreamPath::new(0, it, 0, Purpose::Move));
            let accepted = asmh_step(
                &mut state,
                0,
                &q_active,
                &InactiveProposal::Prior,
                ctx,
                &mut rng_step,
            )
            .unwrap();
            assert_eq!(accepted, expect_accept, "iteration {it}");
        }
    }

    #[test]
    fn degenerate_proposal_always_accepts() {
        // A zero-covariance-limit proposal is emulated by forcing the same
        // point and identical draws: alpha = 1 because numerator and
        // denominator coincide.
        let (target, basis) = plane_setup(3);
        let projected = project_prior(target.prior(), &basis).unwrap();
        let ctx = SamplerContext::new(&target, &basis, &projected);
        let stage = target.stages();
        let active = DVector::from_vec(vec![0.5]);
        let mut rng_a = derive_stream(7, StreamPath::new(0, 0, 0, Purpose::Move));
        let cloud_a = sample_cloud(ctx, &active, &InactiveProposal::Prior, 5, stage, &mut rng_a).unwrap();
        let mut rng_b = derive_stream(7, StreamPath::new(0, 0, 0, Purpose::Move));
        let cloud_b = sample_cloud(ctx, &active, &InactiveProposal::Prior, 5, stage, &mut rng_b).unwrap();
        // Same point, same forced draws: the acceptance log-ratio vanishes.
        let log_alpha = (ctx.projected.log_active(&active) + cloud_b.log_estimate())
            - (ctx.projected.log_active(&active) + cloud_a.log_estimate());
        assert_eq!(log_alpha, 0.0);
    }

    #[test]
    fn zero_iterations_returns_initial_state_only() {
        let (target, basis) = plane_setup(3);
        let run = run_asmh(
            &AsmhConfig {
                iterations: 0,
                n_inactive: 3,
                active_cov: None,
            },
            &target,
            &basis,
            1,
            0,
        )
        .unwrap();
        assert_eq!(run.chain.len(), 1);
        assert_eq!(run.acceptance_rate, 0.0);
    }

    #[test]
    fn seeded_chains_are_identical() {
        let (target, basis) = plane_setup(3);
        let config = AsmhConfig {
            iterations: 50,
            n_inactive: 4,
            active_cov: None,
        };
        let a = run_asmh(&config, &target, &basis, 99, 0).unwrap();
        let b = run_asmh(&config, &target, &basis, 99, 0).unwrap();
        for (x, y) in a.chain.iter().zip(&b.chain) {
            assert_eq!(x.theta.as_slice(), y.theta.as_slice());
            assert_eq!(x.log_estimate, y.log_estimate);
        }
        let c = run_asmh(&config, &target, &basis, 100, 0).unwrap();
        assert!(a.chain.iter().zip(&c.chain).any(|(x, y)| x.theta != y.theta));
    }

    #[test]
    fn chain_csv_has_expected_shape() {
        let (target, basis) = plane_setup(2);
        let run = run_asmh(
            &AsmhConfig {
                iterations: 3,
                n_inactive: 2,
                active_cov: Some(DMatrix::identity(1, 1)),
            },
            &target,
            &basis,
            5,
            0,
        )
        .unwrap();
        let mut buf = Vec::new();
        run.write_chain_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "iteration,a0,theta0,theta1,log_estimate,accepted");
        assert_eq!(lines.count(), 4);
    }
}
