//! Shared helpers for the integration suites: statistics, oracles and
//! model builders.

#![allow(dead_code)]

use assmc::model::{TargetModel, Tempering};
use assmc::rng::{derive_stream, Purpose, StreamPath};
use assmc::smc::TemperingSchedule;
use assmc::subspace::{
    eigendecompose, estimate_matrix, split_basis, GapRule, GradientSample, SubspaceBasis,
};
use assmc::toymodels::{BananaModel, PlaneModel};
use nalgebra::DVector;

pub const LN_2PI: f64 = 1.8378770664093453;

/// Sample mean and its standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// |cos angle| between a vector and a coordinate axis.
pub fn abs_cos_with_axis(v: &DVector<f64>, axis: usize) -> f64 {
    v[axis].abs() / v.norm()
}

/// Angle between two unit-norm-ish vectors, sign-insensitive.
pub fn angle_between(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let cos = (a.dot(b) / (a.norm() * b.norm())).abs().min(1.0);
    cos.acos()
}

/// Subspace estimated from prior draws with the full-likelihood score.
pub fn prior_sample_basis(
    model: &TargetModel,
    n_draws: usize,
    rule: GapRule,
    seed: u64,
) -> (SubspaceBasis, assmc::subspace::Spectrum) {
    let w = 1.0 / n_draws as f64;
    let samples: Vec<GradientSample> = (0..n_draws)
        .map(|m| {
            let mut rng = derive_stream(seed, StreamPath::new(0, 0, m as u64, Purpose::PriorInit));
            let theta = model.sample_prior(&mut rng);
            let gradient = model.score(&theta);
            GradientSample::new(theta, gradient, w)
        })
        .collect();
    let spectrum = eigendecompose(&estimate_matrix(&samples).unwrap()).unwrap();
    let basis = split_basis(&spectrum, rule).unwrap();
    (basis, spectrum)
}

/// Exact log evidence of the plane model under an annealed likelihood
/// l^eta: closed form from the 1-D ridge-coordinate Gaussian integral,
/// derived independently of the model's own oracle.
pub fn plane_log_evidence_tempered(model: &PlaneModel, eta: f64) -> f64 {
    let n = model.data.len() as f64;
    let sum_y: f64 = model.data.iter().sum();
    let sum_y2: f64 = model.data.iter().map(|y| y * y).sum();
    let ridge_var = model.dim as f64 * model.prior_var;
    let a = eta * n;
    let b = eta * sum_y;
    -0.5 * n * eta * LN_2PI - 0.5 * eta * sum_y2 - 0.5 * (1.0 + a * ridge_var).ln()
        + 0.5 * b * b * ridge_var / (1.0 + a * ridge_var)
}

/// Simpson rule in two dimensions for a log-space integrand on a centred
/// square, refined until self-consistent to `tol` (absolute, in log).
pub fn log_integral_2d<F>(log_f: F, half_width: f64, tol: f64, start_cells: usize) -> f64
where
    F: Fn(f64, f64) -> f64,
{
    let mut cells = start_cells;
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..12 {
        let h = 2.0 * half_width / cells as f64;
        // Two passes: first the maximum for a stable shift, then the sum.
        let mut max_log = f64::NEG_INFINITY;
        for i in 0..=cells {
            let x = -half_width + i as f64 * h;
            for j in 0..=cells {
                let y = -half_width + j as f64 * h;
                max_log = max_log.max(log_f(x, y));
            }
        }
        let weight = |k: usize| -> f64 {
            if k == 0 || k == cells {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            }
        };
        let mut acc = 0.0;
        for i in 0..=cells {
            let x = -half_width + i as f64 * h;
            let wi = weight(i);
            for j in 0..=cells {
                let y = -half_width + j as f64 * h;
                acc += wi * weight(j) * (log_f(x, y) - max_log).exp();
            }
        }
        let value = max_log + (acc * h * h / 9.0).ln();
        if (value - prev).abs() < tol {
            return value;
        }
        prev = value;
        cells *= 2;
    }
    prev
}

/// The banana model instance used by the quadrature-oracle criteria:
/// d = 3, k = 2, small prior so the tensor grid resolves quickly.
pub fn quadrature_banana() -> BananaModel {
    BananaModel::with_synthetic_data(3, 2, 0.001, 6, 100.0, 101)
}

pub fn annealed(stages: usize) -> Tempering {
    Tempering::Annealed(TemperingSchedule::uniform(stages).unwrap())
}
