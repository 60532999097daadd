//! Small numeric helpers used throughout: stable log-sum-exp, weighted
//! moments, half-integer log-gamma.

use nalgebra::{DMatrix, DVector};

/// Stable log(sum(exp(x))). Returns -inf for an empty slice or when every
/// entry is -inf.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        // All -inf (or empty); +inf propagates as +inf.
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Normalise log weights to probabilities summing to one.
/// Entries at -inf map to zero.
pub fn normalise_log_weights(log_w: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(log_w);
    log_w.iter().map(|&lw| (lw - lse).exp()).collect()
}

/// Subtract log(sum(exp)) so the log weights sum to one in linear space.
pub fn normalise_log_weights_in_place(log_w: &mut [f64]) {
    let lse = log_sum_exp(log_w);
    for lw in log_w.iter_mut() {
        *lw -= lse;
    }
}

/// Weighted mean of a set of vectors. Weights must sum to one.
pub fn weighted_mean(points: &[DVector<f64>], weights: &[f64]) -> DVector<f64> {
    let dim = points[0].len();
    let mut mean = DVector::zeros(dim);
    for (p, &w) in points.iter().zip(weights) {
        mean.axpy(w, p, 1.0);
    }
    mean
}

/// Weighted (population) covariance of a set of vectors. Weights must sum
/// to one. No Bessel correction.
pub fn weighted_covariance(
    points: &[DVector<f64>],
    weights: &[f64],
    mean: &DVector<f64>,
) -> DMatrix<f64> {
    let dim = mean.len();
    let mut cov = DMatrix::zeros(dim, dim);
    for (p, &w) in points.iter().zip(weights) {
        let c = p - mean;
        cov.ger(w, &c, &c, 1.0);
    }
    // Enforce exact symmetry.
    for r in 0..dim {
        for c in (r + 1)..dim {
            let v = 0.5 * (cov[(r, c)] + cov[(c, r)]);
            cov[(r, c)] = v;
            cov[(c, r)] = v;
        }
    }
    cov
}

/// log Gamma(n/2) for positive integer n, computed exactly from the
/// half-integer recursion. Used by the multivariate t density, where the
/// degrees-of-freedom argument is always integral.
pub fn ln_gamma_half(n: usize) -> f64 {
    assert!(n > 0, "ln_gamma_half requires n >= 1");
    // Gamma(1/2) = sqrt(pi), Gamma(1) = 1, Gamma(x + 1) = x Gamma(x).
    let mut value = if n % 2 == 1 {
        0.5 * std::f64::consts::PI.ln()
    } else {
        0.0
    };
    let mut k = if n % 2 == 1 { 1 } else { 2 };
    while k + 2 <= n {
        value += (k as f64 / 2.0).ln();
        k += 2;
    }
    value
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_matches_direct() {
        let xs: [f64; 3] = [-1.0, 0.5, 2.0];
        let direct: f64 = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&xs) - direct).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_handles_extremes() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        // Large offsets must not overflow.
        let v = log_sum_exp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2.0_f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn ln_gamma_half_small_values() {
        // Gamma(1/2) = sqrt(pi), Gamma(1) = 1, Gamma(3/2) = sqrt(pi)/2,
        // Gamma(2) = 1, Gamma(5/2) = 3 sqrt(pi)/4, Gamma(3) = 2.
        let pi = std::f64::consts::PI;
        let cases = [
            (1, 0.5 * pi.ln()),
            (2, 0.0),
            (3, 0.5 * pi.ln() - 2.0_f64.ln()),
            (4, 0.0),
            (5, (3.0 * pi.sqrt() / 4.0_f64).ln()),
            (6, 2.0_f64.ln()),
        ];
        for (n, expect) in cases {
            assert!(
                (ln_gamma_half(n) - expect).abs() < 1e-12,
                "n = {n}: {} vs {expect}",
                ln_gamma_half(n)
            );
        }
    }

    #[test]
    fn weighted_moments_match_hand_computation() {
        let pts = vec![
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![-1.0, 2.0]),
        ];
        let w = [0.25, 0.75];
        let mean = weighted_mean(&pts, &w);
        assert!((mean[0] - (-0.5)).abs() < 1e-15);
        assert!((mean[1] - 1.5).abs() < 1e-15);
        let cov = weighted_covariance(&pts, &w, &mean);
        // var_x = 0.25*1.5^2 + 0.75*0.5^2 = 0.75
        assert!((cov[(0, 0)] - 0.75).abs() < 1e-14);
        assert!((cov[(1, 1)] - 0.25 * 2.25 - 0.75 * 0.25).abs() < 1e-14);
    }
}
