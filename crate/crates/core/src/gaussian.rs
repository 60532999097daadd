//! Dense Gaussian and multivariate Student-t distributions on R^d.
//!
//! These are the only distribution families the crate needs: Gaussian priors
//! and their projections, Gaussian random-walk proposals, and Gaussian or
//! t(5) independence proposals for the inactive variables. Densities are
//! always evaluated in log space. `d = 0` is a valid dimension (the point
//! distribution on the empty vector, with log density zero), which lets the
//! no-inactive-variables case share every code path.

use crate::error::{Error, Result};
use crate::math::ln_gamma_half;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone)]
enum Shape {
    /// Covariance `var * I`. Exact algebra, no factorisation.
    Isotropic { var: f64 },
    /// General SPD covariance with cached lower Cholesky factor.
    Full { cov: DMatrix<f64>, chol: DMatrix<f64> },
}

/// Multivariate Gaussian with cached factorisation.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: DVector<f64>,
    shape: Shape,
    /// -(d/2) ln 2pi - (1/2) ln det cov
    log_norm: f64,
}

impl Gaussian {
    pub fn isotropic(mean: DVector<f64>, var: f64) -> Result<Self> {
        if !(var > 0.0) && mean.len() > 0 {
            return Err(Error::NotPositiveDefinite);
        }
        let d = mean.len() as f64;
        let log_norm = -0.5 * d * (LN_2PI + var.ln());
        Ok(Gaussian {
            mean,
            shape: Shape::Isotropic { var },
            log_norm,
        })
    }

    pub fn full(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: cov.nrows(),
            });
        }
        if d == 0 {
            return Ok(Gaussian {
                mean,
                shape: Shape::Full {
                    cov,
                    chol: DMatrix::zeros(0, 0),
                },
                log_norm: 0.0,
            });
        }
        let chol = nalgebra::Cholesky::new(cov.clone())
            .ok_or(Error::NotPositiveDefinite)?
            .l();
        let log_det: f64 = (0..d).map(|j| chol[(j, j)].ln()).sum::<f64>() * 2.0;
        let log_norm = -0.5 * (d as f64 * LN_2PI + log_det);
        Ok(Gaussian {
            mean,
            shape: Shape::Full { cov, chol },
            log_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Dense covariance matrix (materialised for the isotropic case).
    pub fn covariance(&self) -> DMatrix<f64> {
        match &self.shape {
            Shape::Isotropic { var } => DMatrix::identity(self.dim(), self.dim()) * *var,
            Shape::Full { cov, .. } => cov.clone(),
        }
    }

    pub fn is_isotropic(&self) -> bool {
        matches!(self.shape, Shape::Isotropic { .. })
    }

    pub fn isotropic_variance(&self) -> Option<f64> {
        match &self.shape {
            Shape::Isotropic { var } => Some(*var),
            Shape::Full { .. } => None,
        }
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        if self.dim() == 0 {
            return 0.0;
        }
        match &self.shape {
            Shape::Isotropic { var } => {
                let mut q = 0.0;
                for j in 0..x.len() {
                    let c = x[j] - self.mean[j];
                    q += c * c;
                }
                self.log_norm - 0.5 * q / var
            }
            Shape::Full { chol, .. } => {
                let centred = x - &self.mean;
                let z = chol
                    .solve_lower_triangular(&centred)
                    .expect("cached Cholesky factor is nonsingular");
                self.log_norm - 0.5 * z.norm_squared()
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let d = self.dim();
        if d == 0 {
            return DVector::zeros(0);
        }
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        match &self.shape {
            Shape::Isotropic { var } => {
                let sd = var.sqrt();
                &self.mean + z * sd
            }
            Shape::Full { chol, .. } => &self.mean + chol * z,
        }
    }
}

/// Multivariate Student-t with integer degrees of freedom.
#[derive(Debug, Clone)]
pub struct StudentT {
    location: DVector<f64>,
    scale_chol: DMatrix<f64>,
    dof: usize,
    /// ln Gamma((v+d)/2) - ln Gamma(v/2) - (d/2) ln(v pi) - (1/2) ln det scale
    log_norm: f64,
}

impl StudentT {
    pub fn new(location: DVector<f64>, scale: DMatrix<f64>, dof: usize) -> Result<Self> {
        let d = location.len();
        if scale.nrows() != d || scale.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: scale.nrows(),
            });
        }
        if dof == 0 {
            return Err(Error::InvalidConfig(
                "Student-t degrees of freedom must be positive".into(),
            ));
        }
        if d == 0 {
            return Ok(StudentT {
                location,
                scale_chol: DMatrix::zeros(0, 0),
                dof,
                log_norm: 0.0,
            });
        }
        let chol = nalgebra::Cholesky::new(scale.clone())
            .ok_or(Error::NotPositiveDefinite)?
            .l();
        let log_det: f64 = (0..d).map(|j| chol[(j, j)].ln()).sum::<f64>() * 2.0;
        let v = dof as f64;
        let log_norm = ln_gamma_half(dof + d) - ln_gamma_half(dof)
            - 0.5 * d as f64 * (v * std::f64::consts::PI).ln()
            - 0.5 * log_det;
        Ok(StudentT {
            location,
            scale_chol: chol,
            dof,
            log_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.location.len()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let d = self.dim();
        if d == 0 {
            return 0.0;
        }
        let centred = x - &self.location;
        let z = self
            .scale_chol
            .solve_lower_triangular(&centred)
            .expect("cached Cholesky factor is nonsingular");
        let v = self.dof as f64;
        self.log_norm - 0.5 * (v + d as f64) * (z.norm_squared() / v).ln_1p()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let d = self.dim();
        if d == 0 {
            return DVector::zeros(0);
        }
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let w: f64 = ChiSquared::new(self.dof as f64)
            .expect("positive degrees of freedom")
            .sample(rng);
        let scale = (self.dof as f64 / w).sqrt();
        &self.location + (&self.scale_chol * z) * scale
    }
}
