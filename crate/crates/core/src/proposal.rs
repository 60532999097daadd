//! Proposal distributions: a Gaussian random walk on the active coordinates
//! and the independence proposals (projected prior, Gaussian, Student-t(5))
//! used for the inactive coordinates.

use crate::error::Result;
use crate::gaussian::{Gaussian, StudentT};
use crate::math::{weighted_covariance, weighted_mean};
use crate::model::ProjectedPrior;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Scaling constant 2.38^2 / d for random-walk covariances.
pub fn rw_scale(dim: usize) -> f64 {
    2.38 * 2.38 / dim.max(1) as f64
}

/// Gaussian random walk proposal on the active coordinates.
#[derive(Debug, Clone)]
pub struct ActiveProposal {
    step: Gaussian,
}

impl ActiveProposal {
    pub fn from_covariance(cov: DMatrix<f64>) -> Result<Self> {
        let d = cov.nrows();
        Ok(ActiveProposal {
            step: Gaussian::full(DVector::zeros(d), cov)?,
        })
    }

    /// Pre-adaptation default: 2.38^2/d_a times the prior marginal
    /// covariance of the active coordinates.
    pub fn default_for(projected: &ProjectedPrior) -> Result<Self> {
        let marginal = projected.marginal_active();
        let cov = marginal.covariance() * rw_scale(marginal.dim());
        ActiveProposal::from_covariance(cov)
    }

    /// Scaled empirical covariance of a weighted point cloud, regularised by
    /// 1e-10 * trace on the diagonal; falls back to the identity when the
    /// cloud has no spread.
    pub fn adapted(points: &[DVector<f64>], weights: &[f64]) -> Result<Self> {
        let dim = points[0].len();
        let mean = weighted_mean(points, weights);
        let mut cov = weighted_covariance(points, weights, &mean);
        let trace: f64 = cov.diagonal().sum();
        if !(trace > 0.0) || !trace.is_finite() {
            cov = DMatrix::identity(dim, dim);
        } else {
            for j in 0..dim {
                cov[(j, j)] += 1e-10 * trace;
            }
        }
        ActiveProposal::from_covariance(cov * rw_scale(dim))
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.step.covariance()
    }

    pub fn propose<R: Rng + ?Sized>(&self, current: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        current + self.step.sample(rng)
    }

    /// log q(to | from); symmetric in its arguments for a random walk, kept
    /// explicit so the Hastings correction is always applied.
    pub fn log_density(&self, from: &DVector<f64>, to: &DVector<f64>) -> f64 {
        self.step.log_density(&(to - from))
    }
}

/// Which family the adapted inactive proposal uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InactiveFamily {
    /// The projected prior conditional; no adaptation.
    #[default]
    Prior,
    Gaussian,
    StudentT,
}

/// Independence proposal for the inactive coordinates.
#[derive(Debug, Clone)]
pub enum InactiveProposal {
    /// The conditional prior p_i(. | a).
    Prior,
    /// Adapted Gaussian, independent of the active point.
    Gaussian(Gaussian),
    /// Adapted multivariate t with 5 degrees of freedom.
    StudentT(StudentT),
}

/// Degrees of freedom of the Student-t inactive proposal.
pub const STUDENT_T_DOF: usize = 5;

impl InactiveProposal {
    /// Build an adapted proposal from weighted moments, falling back to the
    /// prior conditional when the covariance is degenerate.
    pub fn adapted(
        family: InactiveFamily,
        points: &[DVector<f64>],
        weights: &[f64],
    ) -> InactiveProposal {
        if family == InactiveFamily::Prior || points.is_empty() {
            return InactiveProposal::Prior;
        }
        let mean = weighted_mean(points, weights);
        if !mean.iter().all(|x| x.is_finite()) {
            return InactiveProposal::Prior;
        }
        let cov = weighted_covariance(points, weights, &mean);
        match family {
            InactiveFamily::Prior => InactiveProposal::Prior,
            InactiveFamily::Gaussian => match Gaussian::full(mean, cov) {
                Ok(g) => InactiveProposal::Gaussian(g),
                Err(_) => InactiveProposal::Prior,
            },
            InactiveFamily::StudentT => match StudentT::new(mean, cov, STUDENT_T_DOF) {
                Ok(t) => InactiveProposal::StudentT(t),
                Err(_) => InactiveProposal::Prior,
            },
        }
    }

    pub fn is_prior(&self) -> bool {
        matches!(self, InactiveProposal::Prior)
    }

    pub fn log_density(
        &self,
        projected: &ProjectedPrior,
        inactive: &DVector<f64>,
        active: &DVector<f64>,
    ) -> f64 {
        match self {
            InactiveProposal::Prior => projected.log_inactive(inactive, active),
            InactiveProposal::Gaussian(g) => g.log_density(inactive),
            InactiveProposal::StudentT(t) => t.log_density(inactive),
        }
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        projected: &ProjectedPrior,
        active: &DVector<f64>,
        rng: &mut R,
    ) -> DVector<f64> {
        match self {
            InactiveProposal::Prior => projected.sample_inactive(active, rng),
            InactiveProposal::Gaussian(g) => g.sample(rng),
            InactiveProposal::StudentT(t) => t.sample(rng),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_stream, Purpose, StreamPath};

    #[test]
    fn adapted_active_matches_hand_arithmetic() {
        // Two equally weighted points at +-1 in one dimension: unit variance,
        // scaled by 2.38^2.
        let pts = vec![
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![-1.0]),
        ];
        let q = ActiveProposal::adapted(&pts, &[0.5, 0.5]).unwrap();
        let cov = q.covariance();
        assert!((cov[(0, 0)] - 5.6644).abs() < 1e-9, "{}", cov[(0, 0)]);
    }

    #[test]
    fn adapted_active_identical_points_fall_back() {
        let pts = vec![DVector::from_vec(vec![2.0, 2.0]); 4];
        let q = ActiveProposal::adapted(&pts, &[0.25; 4]).unwrap();
        let cov = q.covariance();
        let expect = rw_scale(2);
        assert!((cov[(0, 0)] - expect).abs() < 1e-12);
        assert!(cov[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn adapted_active_matches_brute_force_weighted_covariance() {
        let pts = vec![
            DVector::from_vec(vec![0.0, 1.0]),
            DVector::from_vec(vec![2.0, -1.0]),
            DVector::from_vec(vec![-1.0, 0.5]),
        ];
        let w = [0.2, 0.5, 0.3];
        let q = ActiveProposal::adapted(&pts, &w).unwrap();
        let mean = weighted_mean(&pts, &w);
        let mut brute = DMatrix::zeros(2, 2);
        for (p, &wk) in pts.iter().zip(&w) {
            let c = p - &mean;
            brute += (&c * c.transpose()) * wk;
        }
        let trace = brute.trace();
        for j in 0..2 {
            brute[(j, j)] += 1e-10 * trace;
        }
        brute *= rw_scale(2);
        assert!((q.covariance() - brute).abs().max() < 1e-12);
    }

    #[test]
    fn degenerate_inactive_covariance_falls_back_to_prior() {
        // Two points in two dimensions span at most one direction.
        let pts = vec![
            DVector::from_vec(vec![0.0, 0.0]),
            DVector::from_vec(vec![1.0, 1.0]),
        ];
        let q = InactiveProposal::adapted(InactiveFamily::Gaussian, &pts, &[0.5, 0.5]);
        assert!(q.is_prior());
    }

    #[test]
    fn random_walk_density_is_symmetric() {
        let q = ActiveProposal::from_covariance(DMatrix::identity(2, 2) * 0.7).unwrap();
        let a = DVector::from_vec(vec![0.2, -1.0]);
        let b = DVector::from_vec(vec![1.5, 0.5]);
        assert_eq!(q.log_density(&a, &b), q.log_density(&b, &a));
        let mut rng = derive_stream(5, StreamPath::new(0, 0, 0, Purpose::Move));
        let c = q.propose(&a, &mut rng);
        assert_eq!(c.len(), 2);
    }
}
