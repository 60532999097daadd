//! Estimation of the likelihood-informed subspace: weighted outer products
//! of score vectors, a symmetric eigensolver, and the spectral-gap rules
//! that split the eigenbasis into active and inactive directions.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// One weighted score observation: a point, the log-likelihood gradient at
/// that point, and a normalised weight.
#[derive(Debug, Clone)]
pub struct GradientSample {
    pub point: DVector<f64>,
    pub gradient: DVector<f64>,
    pub weight: f64,
}

impl GradientSample {
    pub fn new(point: DVector<f64>, gradient: DVector<f64>, weight: f64) -> Self {
        GradientSample {
            point,
            gradient,
            weight,
        }
    }
}

/// Eigendecomposition of the score outer-product matrix, eigenvalues sorted
/// descending with eigenvector columns paired to them.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl Spectrum {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Fraction of total spectral mass carried by the leading `k` directions.
    /// Negative round-off eigenvalues count as zero.
    pub fn explained_fraction(&self, k: usize) -> f64 {
        let total: f64 = self.eigenvalues.iter().map(|&l| l.max(0.0)).sum();
        if total <= 0.0 {
            return 0.0;
        }
        let head: f64 = self
            .eigenvalues
            .iter()
            .take(k)
            .map(|&l| l.max(0.0))
            .sum();
        head / total
    }

    /// Write the spectrum as `index,eigenvalue` CSV rows.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "index,eigenvalue")?;
        for (j, l) in self.eigenvalues.iter().enumerate() {
            writeln!(out, "{},{}", j + 1, l)?;
        }
        Ok(())
    }
}

/// Rule for choosing how many leading eigenvectors become active directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapRule {
    /// Largest consecutive eigenvalue ratio, ties broken toward fewer active
    /// directions. Falls back to a fully active space when no ratio exceeds
    /// [`GAP_RATIO_THRESHOLD`].
    LargestGap,
    /// Smallest prefix explaining at least this fraction of spectral mass.
    ExplainedVariance(f64),
    /// Fixed number of active directions.
    Fixed(usize),
}

/// Below this ratio a "gap" is considered noise and the whole space stays
/// active, signalling that standard moves should be used.
pub const GAP_RATIO_THRESHOLD: f64 = 2.0;

/// Guard against division by zero in eigenvalue ratios.
const RATIO_EPS: f64 = 1e-300;

/// Eigenvalues below this fraction of the leading one are numerically zero
/// (the eigensolver converges to 1e-12 of the matrix norm); a gap can only
/// sit after a significant eigenvalue, otherwise a ratio between two
/// round-off values (e.g. 1e-12 over an exact 0) would win.
const GAP_SIGNIFICANCE_FLOOR: f64 = 1e-12;

/// Orthonormal split of R^d into active directions (columns of `active`)
/// and inactive directions (columns of `inactive`), together with the
/// spectrum that produced it.
#[derive(Debug, Clone)]
pub struct SubspaceBasis {
    active: DMatrix<f64>,
    inactive: DMatrix<f64>,
    spectrum: Spectrum,
    is_identity: bool,
}

impl SubspaceBasis {
    /// Build from explicit matrices, checking that `[active inactive]` is an
    /// orthonormal basis of R^d to 1e-10.
    pub fn new(active: DMatrix<f64>, inactive: DMatrix<f64>, spectrum: Spectrum) -> Result<Self> {
        let d = active.nrows();
        if inactive.nrows() != d && inactive.ncols() > 0 {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: inactive.nrows(),
            });
        }
        if active.ncols() == 0 {
            return Err(Error::InvalidActiveDim {
                requested: 0,
                dim: d,
            });
        }
        if active.ncols() + inactive.ncols() != d {
            return Err(Error::InvalidActiveDim {
                requested: active.ncols() + inactive.ncols(),
                dim: d,
            });
        }
        let basis = SubspaceBasis {
            active,
            inactive,
            spectrum,
            is_identity: false,
        };
        let mut full = DMatrix::zeros(d, d);
        full.view_mut((0, 0), (d, basis.active.ncols()))
            .copy_from(&basis.active);
        full.view_mut((0, basis.active.ncols()), (d, basis.inactive.ncols()))
            .copy_from(&basis.inactive);
        let gram = full.transpose() * &full;
        let dev = (&gram - DMatrix::identity(d, d)).abs().max();
        if dev > 1e-10 {
            return Err(Error::InvalidConfig(format!(
                "basis columns are not orthonormal (deviation {dev:e})"
            )));
        }
        Ok(basis)
    }

    /// Identity basis: every direction active, none inactive. Used when the
    /// spectrum shows no usable gap and for plain samplers on the original
    /// coordinates.
    pub fn identity(d: usize) -> Self {
        SubspaceBasis {
            active: DMatrix::identity(d, d),
            inactive: DMatrix::zeros(d, 0),
            spectrum: Spectrum {
                eigenvalues: DVector::from_element(d, 1.0),
                eigenvectors: DMatrix::identity(d, d),
            },
            is_identity: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.active.nrows()
    }

    pub fn active_dim(&self) -> usize {
        self.active.ncols()
    }

    pub fn inactive_dim(&self) -> usize {
        self.inactive.ncols()
    }

    pub fn active_matrix(&self) -> &DMatrix<f64> {
        &self.active
    }

    pub fn inactive_matrix(&self) -> &DMatrix<f64> {
        &self.inactive
    }

    pub fn spectrum(&self) -> &Spectrum {
        &self.spectrum
    }

    pub fn is_identity(&self) -> bool {
        self.is_identity
    }

    /// Active coordinates of a point.
    pub fn project_active(&self, theta: &DVector<f64>) -> DVector<f64> {
        if self.is_identity {
            theta.clone()
        } else {
            self.active.tr_mul(theta)
        }
    }

    /// Inactive coordinates of a point.
    pub fn project_inactive(&self, theta: &DVector<f64>) -> DVector<f64> {
        if self.inactive_dim() == 0 {
            DVector::zeros(0)
        } else {
            self.inactive.tr_mul(theta)
        }
    }

    /// Reassemble a point from its coordinates.
    pub fn reconstruct(&self, active: &DVector<f64>, inactive: &DVector<f64>) -> DVector<f64> {
        if self.is_identity {
            return active.clone();
        }
        let mut theta = &self.active * active;
        if self.inactive_dim() > 0 {
            theta += &self.inactive * inactive;
        }
        theta
    }
}

/// Weighted outer-product matrix of score vectors. Weights must be
/// normalised by the caller; both the equal-weight form and the
/// doubly-weighted form used by the samplers pass through here.
pub fn estimate_matrix(samples: &[GradientSample]) -> Result<DMatrix<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("gradient sample list"));
    }
    let d = samples[0].gradient.len();
    let mut weight_sum = 0.0;
    for (idx, s) in samples.iter().enumerate() {
        if s.gradient.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: s.gradient.len(),
            });
        }
        if s.gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { index: idx });
        }
        if !(s.weight >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "negative or NaN weight in sample {idx}"
            )));
        }
        weight_sum += s.weight;
    }
    if (weight_sum - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidConfig(format!(
            "sample weights must sum to 1 (got {weight_sum})"
        )));
    }
    let mut m = DMatrix::zeros(d, d);
    for s in samples {
        if s.weight == 0.0 {
            continue;
        }
        // Fill the upper triangle, mirror afterwards: exactly symmetric.
        for r in 0..d {
            let wg = s.weight * s.gradient[r];
            for c in r..d {
                m[(r, c)] += wg * s.gradient[c];
            }
        }
    }
    for r in 0..d {
        for c in (r + 1)..d {
            m[(c, r)] = m[(r, c)];
        }
    }
    Ok(m)
}

/// Eigendecomposition of a symmetric PSD matrix by cyclic Jacobi sweeps.
///
/// Deterministic: eigenvalues are sorted descending (index tie-break) and
/// each eigenvector is flipped so that its first nonzero entry is positive.
pub fn eigendecompose(matrix: &DMatrix<f64>) -> Result<Spectrum> {
    let d = matrix.nrows();
    if matrix.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: matrix.ncols(),
        });
    }
    let scale = matrix.abs().max().max(1.0);
    let mut max_asym = 0.0_f64;
    for r in 0..d {
        for c in (r + 1)..d {
            max_asym = max_asym.max((matrix[(r, c)] - matrix[(c, r)]).abs());
        }
    }
    if max_asym > 1e-10 * scale {
        return Err(Error::NotSymmetric { max_asym });
    }

    let mut a = matrix.clone();
    let mut v = DMatrix::identity(d, d);
    let norm = matrix.norm(); // Frobenius
    let tol = 1e-12 * norm;

    const MAX_SWEEPS: usize = 100;
    let mut converged = norm == 0.0 || d < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut off = 0.0;
        for r in 0..d {
            for c in (r + 1)..d {
                off += a[(r, c)] * a[(r, c)];
            }
        }
        if (2.0 * off).sqrt() <= tol {
            converged = true;
            break;
        }
        for p in 0..d - 1 {
            for q in (p + 1)..d {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Rotate rows/columns p and q of A.
                for k in 0..d {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                // Accumulate the rotation into the eigenvector matrix.
                for k in 0..d {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        // One final check after the sweep budget.
        let mut off = 0.0;
        for r in 0..d {
            for c in (r + 1)..d {
                off += a[(r, c)] * a[(r, c)];
            }
        }
        if (2.0 * off).sqrt() > tol {
            return Err(Error::EigenNoConvergence { sweeps: MAX_SWEEPS });
        }
    }

    // Stable sort: descending eigenvalue, ascending index on ties.
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| {
        a[(j, j)]
            .partial_cmp(&a[(i, i)])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut eigenvalues = DVector::zeros(d);
    let mut eigenvectors = DMatrix::zeros(d, d);
    for (slot, &src) in order.iter().enumerate() {
        eigenvalues[slot] = a[(src, src)];
        let mut col = v.column(src).clone_owned();
        if let Some(first) = col.iter().find(|&&x| x != 0.0) {
            if *first < 0.0 {
                col.neg_mut();
            }
        }
        eigenvectors.set_column(slot, &col);
    }
    Ok(Spectrum {
        eigenvalues,
        eigenvectors,
    })
}

/// Number of active directions chosen by a rule. Always at least one; equal
/// to d when the rule finds nothing inactive.
pub fn choose_active_dim(spectrum: &Spectrum, rule: GapRule) -> Result<usize> {
    let d = spectrum.dim();
    if d == 0 {
        return Err(Error::EmptyInput("spectrum"));
    }
    match rule {
        GapRule::Fixed(k) => {
            if k < 1 || k > d {
                return Err(Error::InvalidActiveDim {
                    requested: k,
                    dim: d,
                });
            }
            Ok(k)
        }
        GapRule::ExplainedVariance(fraction) => {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(Error::InvalidConfig(format!(
                    "explained-variance fraction must lie in [0, 1], got {fraction}"
                )));
            }
            let total: f64 = spectrum.eigenvalues.iter().map(|&l| l.max(0.0)).sum();
            if total <= 0.0 {
                // Flat spectrum carries no information: keep everything active.
                return Ok(d);
            }
            let mut head = 0.0;
            for j in 0..d {
                head += spectrum.eigenvalues[j].max(0.0);
                if head / total >= fraction {
                    return Ok(j + 1);
                }
            }
            Ok(d)
        }
        GapRule::LargestGap => {
            if d == 1 {
                return Ok(1);
            }
            let floor = GAP_SIGNIFICANCE_FLOOR * spectrum.eigenvalues[0];
            let mut best_j = 0usize;
            let mut best_ratio = f64::NEG_INFINITY;
            for j in 0..d - 1 {
                if !(spectrum.eigenvalues[j] > floor) {
                    break;
                }
                let ratio = spectrum.eigenvalues[j] / (spectrum.eigenvalues[j + 1] + RATIO_EPS);
                if ratio > best_ratio {
                    best_ratio = ratio;
                    best_j = j;
                }
            }
            if best_ratio <= GAP_RATIO_THRESHOLD {
                Ok(d)
            } else {
                Ok(best_j + 1)
            }
        }
    }
}

/// Split a spectrum into active and inactive orthonormal bases.
pub fn split_basis(spectrum: &Spectrum, rule: GapRule) -> Result<SubspaceBasis> {
    let d = spectrum.dim();
    let d_active = choose_active_dim(spectrum, rule)?;
    let active = spectrum.eigenvectors.columns(0, d_active).clone_owned();
    let inactive = spectrum
        .eigenvectors
        .columns(d_active, d - d_active)
        .clone_owned();
    SubspaceBasis::new(active, inactive, spectrum.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec2(x: f64, y: f64) -> DVector<f64> {
        DVector::from_vec(vec![x, y])
    }

    #[test]
    fn rank_one_outer_product() {
        let s = GradientSample::new(vec2(0.0, 0.0), vec2(1.0, 2.0), 1.0);
        let m = estimate_matrix(&[s]).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert_eq!(m, expect);
    }

    #[test]
    fn axis_gradients_give_half_identity() {
        let samples = [
            GradientSample::new(vec2(0.0, 0.0), vec2(1.0, 0.0), 0.5),
            GradientSample::new(vec2(0.0, 0.0), vec2(0.0, 1.0), 0.5),
        ];
        let m = estimate_matrix(&samples).unwrap();
        assert_eq!(m, DMatrix::identity(2, 2) * 0.5);
    }

    #[test]
    fn estimate_matrix_rejects_bad_input() {
        assert!(matches!(
            estimate_matrix(&[]),
            Err(Error::EmptyInput(_))
        ));
        let bad = GradientSample::new(vec2(0.0, 0.0), vec2(f64::NAN, 0.0), 1.0);
        match estimate_matrix(&[GradientSample::new(vec2(0.0, 0.0), vec2(1.0, 0.0), 0.5), bad]) {
            Err(Error::NonFiniteGradient { index }) => assert_eq!(index, 1),
            other => panic!("expected NonFiniteGradient, got {other:?}"),
        }
    }

    #[test]
    fn eigendecompose_diagonal() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]);
        let s = eigendecompose(&m).unwrap();
        assert_eq!(s.eigenvalues[0], 4.0);
        assert_eq!(s.eigenvalues[1], 1.0);
        assert_eq!(s.eigenvectors[(0, 0)], 1.0);
        assert_eq!(s.eigenvectors[(1, 1)], 1.0);
    }

    #[test]
    fn eigendecompose_identity_degenerate() {
        let s = eigendecompose(&DMatrix::identity(3, 3)).unwrap();
        for j in 0..3 {
            assert!((s.eigenvalues[j] - 1.0).abs() < 1e-14);
        }
        let v = &s.eigenvectors;
        let gram = v.transpose() * v;
        assert!((gram - DMatrix::identity(3, 3)).abs().max() < 1e-12);
    }

    #[test]
    fn eigendecompose_2x2_closed_form() {
        // [[1,2],[2,4]] has eigenvalues 5 and 0, dominant vector (1,2)/sqrt 5.
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let s = eigendecompose(&m).unwrap();
        assert!((s.eigenvalues[0] - 5.0).abs() < 1e-12);
        assert!(s.eigenvalues[1].abs() < 1e-12);
        let v0 = s.eigenvectors.column(0);
        let sqrt5 = 5.0_f64.sqrt();
        assert!((v0[0] - 1.0 / sqrt5).abs() < 1e-12);
        assert!((v0[1] - 2.0 / sqrt5).abs() < 1e-12);
    }

    #[test]
    fn eigendecompose_reconstructs_input() {
        // Deterministic non-trivial symmetric matrix.
        let d = 6;
        let mut m = DMatrix::zeros(d, d);
        for r in 0..d {
            for c in 0..d {
                let x = ((r * 7 + c * 3 + 1) % 11) as f64 / 11.0;
                m[(r, c)] = x;
            }
        }
        let sym = &m * m.transpose(); // PSD by construction
        let s = eigendecompose(&sym).unwrap();
        let recon =
            &s.eigenvectors * DMatrix::from_diagonal(&s.eigenvalues) * s.eigenvectors.transpose();
        let dev = (&recon - &sym).abs().max();
        assert!(dev < 1e-8 * (1.0 + sym.norm()), "deviation {dev:e}");
        for j in 0..d - 1 {
            assert!(s.eigenvalues[j] >= s.eigenvalues[j + 1]);
        }
    }

    #[test]
    fn eigendecompose_rejects_asymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(
            eigendecompose(&m),
            Err(Error::NotSymmetric { .. })
        ));
    }

    #[test]
    fn eigendecompose_is_bit_deterministic() {
        let d = 5;
        let mut m = DMatrix::zeros(d, d);
        for r in 0..d {
            for c in 0..d {
                m[(r, c)] = (((r * 13 + c * 5) % 17) as f64).sin();
            }
        }
        let sym = &m * m.transpose();
        let a = eigendecompose(&sym).unwrap();
        let b = eigendecompose(&sym).unwrap();
        assert_eq!(a.eigenvalues.as_slice(), b.eigenvalues.as_slice());
        assert_eq!(a.eigenvectors.as_slice(), b.eigenvectors.as_slice());
    }

    #[test]
    fn largest_gap_picks_two_of_three() {
        // (5, 4.9, 1e-8): ratios 1.02 and 4.9e8, gap after the second value.
        let s = Spectrum {
            eigenvalues: DVector::from_vec(vec![5.0, 4.9, 1e-8]),
            eigenvectors: DMatrix::identity(3, 3),
        };
        assert_eq!(choose_active_dim(&s, GapRule::LargestGap).unwrap(), 2);
    }

    #[test]
    fn flat_spectrum_keeps_everything_active() {
        let s = Spectrum {
            eigenvalues: DVector::from_element(4, 2.5),
            eigenvectors: DMatrix::identity(4, 4),
        };
        assert_eq!(choose_active_dim(&s, GapRule::LargestGap).unwrap(), 4);
        let basis = split_basis(&s, GapRule::LargestGap).unwrap();
        assert_eq!(basis.active_dim(), 4);
        assert_eq!(basis.inactive_dim(), 0);
    }

    #[test]
    fn explained_variance_rule() {
        let s = Spectrum {
            eigenvalues: DVector::from_vec(vec![8.0, 1.0, 1.0]),
            eigenvectors: DMatrix::identity(3, 3),
        };
        assert_eq!(
            choose_active_dim(&s, GapRule::ExplainedVariance(0.8)).unwrap(),
            1
        );
        assert_eq!(
            choose_active_dim(&s, GapRule::ExplainedVariance(0.9)).unwrap(),
            2
        );
    }

    #[test]
    fn fixed_rule_bounds() {
        let s = Spectrum {
            eigenvalues: DVector::from_vec(vec![2.0, 1.0]),
            eigenvectors: DMatrix::identity(2, 2),
        };
        assert!(choose_active_dim(&s, GapRule::Fixed(0)).is_err());
        assert!(choose_active_dim(&s, GapRule::Fixed(3)).is_err());
        assert_eq!(choose_active_dim(&s, GapRule::Fixed(2)).unwrap(), 2);
    }

    #[test]
    fn basis_round_trip_and_orthonormality() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let s = eigendecompose(&m).unwrap();
        let basis = split_basis(&s, GapRule::Fixed(1)).unwrap();
        assert_eq!(basis.active_dim(), 1);
        assert_eq!(basis.inactive_dim(), 1);
        let theta = vec2(0.3, -1.7);
        let a = basis.project_active(&theta);
        let i = basis.project_inactive(&theta);
        let back = basis.reconstruct(&a, &i);
        assert!((back - &theta).abs().max() < 1e-10);
    }

    #[test]
    fn identity_basis_projects_exactly() {
        let basis = SubspaceBasis::identity(3);
        let theta = DVector::from_vec(vec![1.5, -0.25, 7.0]);
        assert_eq!(basis.project_active(&theta).as_slice(), theta.as_slice());
        assert_eq!(basis.project_inactive(&theta).len(), 0);
        assert_eq!(
            basis
                .reconstruct(&theta, &DVector::zeros(0))
                .as_slice(),
            theta.as_slice()
        );
    }

    #[test]
    fn spectrum_csv_format() {
        let s = Spectrum {
            eigenvalues: DVector::from_vec(vec![2.0, 0.5]),
            eigenvectors: DMatrix::identity(2, 2),
        };
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "index,eigenvalue\n1,2\n2,0.5\n");
    }
}
