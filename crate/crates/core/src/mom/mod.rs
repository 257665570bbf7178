//! Moment-based estimator: project the axis moments onto the valid moment space,
//! recover the axis coordinates of the atoms as polynomial roots, then the remaining
//! coordinates and the weights, and rotate back to the standard basis.

mod projection;
mod simplex;

pub use projection::{
    project_to_valid_moments, project_to_valid_moments_with, HankelPair, ProjectionOptions,
    ProjectionOutcome,
};
pub use simplex::simplex_project;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, MomStage, Result};
use crate::hermite::{estimate_moments, AxisFrame, LatentMoments, DEFAULT_DEGREE_CAP};
use crate::linalg::{condition_number, min_sym_eigenvalue, pinv, PINV_RTOL};
use crate::model::{FeatureMatrix, MixtureParams, SampleCounts};

/// Hankel matrices with a larger condition number are treated as singular.
pub const MAX_HANKEL_CONDITION: f64 = 1e12;
/// Roots are accepted as real when `|imag| ≤ ROOT_IMAG_TOL · (1 + |real|)`.
pub const ROOT_IMAG_TOL: f64 = 1e-6;
/// Slack allowed on `|root| ≤ B` before clipping.
pub const ROOT_CLIP_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct MomDiagnostics {
    pub projection_iters: usize,
    /// Smallest eigenvalue of the projected Hankel matrix `M̃`.
    pub min_hankel_eig: f64,
    pub vandermonde_cond: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomResult {
    pub omega_hat: MixtureParams,
    /// Axis coordinates of the atoms, ascending, clipped to `[−B, B]` (plus slack).
    pub roots: Vec<f64>,
    /// Projected axis moments together with the unprojected mixed moments.
    pub projected_moments: LatentMoments,
    pub axis: DVector<f64>,
    pub diagnostics: MomDiagnostics,
}

/// Orthonormal completion of a unit vector via the Householder reflection that maps
/// `e_1` to `±v`.
pub fn complete_basis(v: &DVector<f64>) -> Result<AxisFrame> {
    let norm = v.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::invalid("axis must be a nonzero finite vector"));
    }
    if (norm - 1.0).abs() > 1e-8 {
        return Err(Error::invalid(format!("axis has norm {norm}, expected 1")));
    }
    let v = v / norm;
    let l = v.len();
    // u = e_1 + sign(v_1) v avoids cancellation; H e_1 = −sign(v_1) v
    let sign = if v[0] > 0.0 { 1.0 } else { -1.0 };
    let mut u = &v * sign;
    u[0] += 1.0;
    let unorm2 = u.norm_squared();
    let mut h = DMatrix::<f64>::identity(l, l);
    h -= (&u * u.transpose()) * (2.0 / unorm2);
    let w = h.columns(1, l - 1).into_owned();
    AxisFrame::new(v, w)
}

/// Roots of the monic polynomial whose coefficients solve `H c = −(m_K, …, m_{2K−1})`,
/// returned with their imaginary parts.
fn hankel_roots_complex(m: &[f64], k: usize) -> Result<Vec<(f64, f64)>> {
    if k == 0 || m.len() < 2 * k {
        return Err(Error::invalid(format!(
            "need {} moments for K = {k}, got {}",
            2 * k,
            m.len()
        )));
    }
    let pair = HankelPair::from_moments(&m[..2 * k])?;
    let cond = condition_number(&pair.h);
    if !(cond <= MAX_HANKEL_CONDITION) {
        return Err(Error::DegenerateMoments { condition: cond });
    }
    let rhs = DVector::from_iterator(k, (k..2 * k).map(|r| -m[r]));
    let coef = pair
        .h
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or(Error::DegenerateMoments { condition: cond })?;
    Ok(companion_roots(&coef))
}

/// Minimum-norm least-squares roots for a singular Hankel system; only used to build a
/// partial result after a degenerate-moments failure.
fn hankel_roots_lenient(m: &[f64], k: usize) -> Vec<(f64, f64)> {
    let h = DMatrix::from_fn(k, k, |i, j| m[i + j]);
    let rhs = DVector::from_iterator(k, (k..2 * k).map(|r| -m[r]));
    companion_roots(&(pinv(&h, PINV_RTOL) * rhs))
}

/// Roots of `x^K + Σ_i c_i x^i`, sorted by real part.
fn companion_roots(coef: &DVector<f64>) -> Vec<(f64, f64)> {
    let k = coef.len();
    let mut companion = DMatrix::zeros(k, k);
    for i in 1..k {
        companion[(i, i - 1)] = 1.0;
    }
    for i in 0..k {
        companion[(i, k - 1)] = -coef[i];
    }
    let eig = companion.complex_eigenvalues();
    let mut roots: Vec<(f64, f64)> = eig.iter().map(|z| (z.re, z.im)).collect();
    roots.sort_by(|a, b| a.0.total_cmp(&b.0));
    roots
}

/// Axis coordinates of the atoms from valid moments `m̃_0..m̃_{2K−1}`, ascending.
pub fn hankel_root_recovery(m_tilde: &[f64], k: usize) -> Result<Vec<f64>> {
    let roots = hankel_roots_complex(m_tilde, k)?;
    for &(re, im) in &roots {
        if im.abs() > ROOT_IMAG_TOL * (1.0 + re.abs()) {
            return Err(Error::ComplexRoot { real: re, imag: im });
        }
    }
    Ok(roots.into_iter().map(|(re, _)| re).collect())
}

/// `V_{rk} = root_k^r` for `r < K`.
fn vandermonde(roots: &[f64]) -> DMatrix<f64> {
    let k = roots.len();
    DMatrix::from_fn(k, k, |r, c| roots[c].powi(r as i32))
}

fn coordinates_unclipped(projected: &LatentMoments, roots: &[f64]) -> Result<DMatrix<f64>> {
    let k = roots.len();
    if projected.mixed.ncols() != k || projected.m.len() < 2 * k - 1 {
        return Err(Error::invalid("moment shapes do not match the number of roots"));
    }
    let hankel = DMatrix::from_fn(k, k, |i, j| projected.m[i + j]);
    Ok(&projected.mixed * pinv(&hankel, PINV_RTOL) * vandermonde(roots))
}

/// Remaining coordinates `w_iᵀθ_k` as an `(L−1) × K` matrix, clipped to `[−B, B]`.
///
/// `projected.m` must hold the projected moments `m̃`; `projected.mixed` the estimated
/// mixed moments, which are used as is.
pub fn recover_coordinates(projected: &LatentMoments, roots: &[f64], bound: f64) -> Result<DMatrix<f64>> {
    Ok(coordinates_unclipped(projected, roots)?.map(|v| v.clamp(-bound, bound)))
}

/// Weights from the Vandermonde system on `(1, m̃_1, …, m̃_{K−1})`, projected onto `Δ^K`.
pub fn recover_weights(m_tilde: &[f64], roots: &[f64]) -> Vec<f64> {
    let k = roots.len();
    let rhs = DVector::from_iterator(k, (0..k).map(|r| if r == 0 { 1.0 } else { m_tilde[r] }));
    let raw = pinv(&vandermonde(roots), PINV_RTOL) * rhs;
    simplex_project(raw.as_slice())
}

/// Runs the recovery on given moments (estimated or exact) expressed in `frame`.
pub fn mom_from_moments(moments: &LatentMoments, frame: &AxisFrame, bound: f64) -> Result<MomResult> {
    let k = moments.k;
    if !(bound > 0.0) || !bound.is_finite() {
        return Err(Error::invalid("support bound must be positive"));
    }
    if moments.m.len() != 2 * k || moments.mixed.nrows() + 1 != frame.dim() {
        return Err(Error::invalid("moments do not match the frame"));
    }
    let projection = project_to_valid_moments_with(&moments.m, bound, &ProjectionOptions::default())
        .map_err(|e| e.at_stage(MomStage::Projection))?;
    let projected = LatentMoments {
        m: projection.moments.clone(),
        mixed: moments.mixed.clone(),
        k,
        bound,
    };
    match hankel_roots_complex(&projected.m, k) {
        Ok(roots) => {
            let complex = roots
                .iter()
                .find(|(re, im)| im.abs() > ROOT_IMAG_TOL * (1.0 + re.abs()))
                .copied();
            let real: Vec<f64> = roots.iter().map(|r| r.0).collect();
            let result = assemble(&projected, real, frame, bound, projection.iterations);
            match complex {
                None => result,
                Some((re, im)) => Err(Error::MomFailure {
                    stage: MomStage::Roots,
                    source: Box::new(Error::ComplexRoot { real: re, imag: im }),
                    partial: result.ok().map(Box::new),
                }),
            }
        }
        Err(e @ Error::DegenerateMoments { .. }) => {
            let real: Vec<f64> = hankel_roots_lenient(&projected.m, k).iter().map(|r| r.0).collect();
            let partial = assemble(&projected, real, frame, bound, projection.iterations).ok();
            Err(Error::MomFailure {
                stage: MomStage::Roots,
                source: Box::new(e),
                partial: partial.map(Box::new),
            })
        }
        Err(e) => Err(e.at_stage(MomStage::Roots)),
    }
}

fn assemble(
    projected: &LatentMoments,
    roots: Vec<f64>,
    frame: &AxisFrame,
    bound: f64,
    projection_iters: usize,
) -> Result<MomResult> {
    let k = projected.k;
    let limit = bound + ROOT_CLIP_SLACK;
    let roots: Vec<f64> = roots.into_iter().map(|r| r.clamp(-limit, limit)).collect();
    let coords =
        recover_coordinates(projected, &roots, bound).map_err(|e| e.at_stage(MomStage::Coordinates))?;
    let alpha = recover_weights(&projected.m, &roots);
    let l = frame.dim();
    let mut thetas = DMatrix::zeros(k, l);
    for c in 0..k {
        let theta = frame.axis() * roots[c] + frame.complement() * coords.column(c);
        thetas.set_row(c, &theta.transpose());
    }
    let omega_hat = MixtureParams::new(alpha, thetas).map_err(|e| e.at_stage(MomStage::Weights))?;
    let hankel = DMatrix::from_fn(k, k, |i, j| projected.m[i + j]);
    let diagnostics = MomDiagnostics {
        projection_iters,
        min_hankel_eig: min_sym_eigenvalue(&hankel),
        vandermonde_cond: condition_number(&vandermonde(&roots)),
    };
    Ok(MomResult {
        omega_hat,
        roots,
        projected_moments: projected.clone(),
        axis: frame.axis().clone(),
        diagnostics,
    })
}

/// Full moment estimator along the primary axis `v`.
pub fn mom_fit(
    counts: &SampleCounts,
    x: &FeatureMatrix,
    k: usize,
    bound: f64,
    v: &DVector<f64>,
) -> Result<MomResult> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if 2 * k - 1 > DEFAULT_DEGREE_CAP {
        return Err(Error::UnsupportedDegree {
            degree: 2 * k - 1,
            cap: DEFAULT_DEGREE_CAP,
        });
    }
    if !(bound > 0.0) || !bound.is_finite() {
        return Err(Error::invalid("support bound must be positive"));
    }
    if v.len() != x.dim() {
        return Err(Error::invalid("axis dimension differs from feature dimension"));
    }
    counts.check_against(x)?;
    let frame = complete_basis(v).map_err(|e| e.at_stage(MomStage::Frame))?;
    let moments =
        estimate_moments(counts, x, &frame, k, bound).map_err(|e| e.at_stage(MomStage::Moments))?;
    mom_from_moments(&moments, &frame, bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hermite::population_latent_moments;

    fn unit(v: &[f64]) -> DVector<f64> {
        let d = DVector::from_column_slice(v);
        let n = d.norm();
        d / n
    }

    #[test]
    fn complete_basis_aligned_case() {
        let f = complete_basis(&unit(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(f.complement(), &DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn complete_basis_orthonormal_and_deterministic() {
        for v in [[0.6, 0.0, 0.8, 0.0], [-0.5, 0.5, -0.5, 0.5], [0.0, 0.0, 0.0, 1.0], [1e-9, 1.0, 0.0, 0.0]] {
            let v = unit(&v);
            let a = complete_basis(&v).unwrap();
            let b = complete_basis(&v).unwrap();
            assert_eq!(a, b);
            let r = a.rotation();
            assert!((r.transpose() * &r - DMatrix::identity(4, 4)).amax() < 1e-10);
            assert_eq!(r.column(0), v.column(0));
        }
        assert!(complete_basis(&DVector::zeros(3)).is_err());
        assert!(complete_basis(&DVector::from_vec(vec![2.0, 0.0])).is_err());
    }

    #[test]
    fn single_root_is_mean() {
        assert_eq!(hankel_root_recovery(&[1.0, 0.37], 1).unwrap(), vec![0.37]);
    }

    #[test]
    fn symmetric_two_point_roots() {
        let a: f64 = 0.6;
        let r = hankel_root_recovery(&[1.0, 0.0, a * a, 0.0], 2).unwrap();
        assert!((r[0] + a).abs() < 1e-12 && (r[1] - a).abs() < 1e-12);
    }

    #[test]
    fn three_atoms_exact_roots() {
        let atoms: [f64; 3] = [-0.71, 0.13, 0.58];
        let w = [0.25, 0.45, 0.3];
        let m: Vec<f64> = (0..6)
            .map(|r| atoms.iter().zip(&w).map(|(t, a)| a * t.powi(r)).sum())
            .collect();
        let roots = hankel_root_recovery(&m, 3).unwrap();
        for (a, b) in roots.iter().zip(atoms) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn coincident_atoms_are_degenerate() {
        let m = [1.0, 0.5, 0.25, 0.125];
        assert!(matches!(
            hankel_root_recovery(&m, 2),
            Err(Error::DegenerateMoments { .. })
        ));
    }

    #[test]
    fn complex_roots_detected() {
        // monic x² + 1
        let m = [1.0, 0.0, -1.0, 0.0];
        assert!(matches!(hankel_root_recovery(&m, 2), Err(Error::ComplexRoot { .. })));
    }

    #[test]
    fn single_component_coordinates_are_mixed_means() {
        let lm = LatentMoments {
            m: vec![1.0, 0.3],
            mixed: DMatrix::from_column_slice(2, 1, &[0.4, 1.5]),
            k: 1,
            bound: 1.0,
        };
        let c = recover_coordinates(&lm, &[0.3], 1.0).unwrap();
        assert!((c[(0, 0)] - 0.4).abs() < 1e-15);
        assert_eq!(c[(1, 0)], 1.0);
        assert_eq!(recover_weights(&lm.m, &[0.3]), vec![1.0]);
    }

    fn two_component_instance() -> (MixtureParams, AxisFrame) {
        let omega = MixtureParams::from_rows(
            vec![0.3, 0.7],
            &[vec![0.5, -0.2, 0.4], vec![-0.3, 0.6, 0.1]],
        )
        .unwrap();
        (omega, complete_basis(&unit(&[1.0, 0.2, -0.1])).unwrap())
    }

    #[test]
    fn exact_moments_recover_coordinates_and_weights() {
        let (omega, frame) = two_component_instance();
        let lm = population_latent_moments(&omega, &frame, 2).unwrap();
        let roots = hankel_root_recovery(&lm.m, 2).unwrap();
        let coords = coordinates_unclipped(&lm, &roots).unwrap();
        let rotated = omega.thetas() * frame.rotation();
        let mut order: Vec<usize> = (0..2).collect();
        order.sort_by(|&a, &b| rotated[(a, 0)].total_cmp(&rotated[(b, 0)]));
        for (slot, &c) in order.iter().enumerate() {
            assert!((roots[slot] - rotated[(c, 0)]).abs() < 1e-8);
            for i in 0..2 {
                assert!((coords[(i, slot)] - rotated[(c, i + 1)]).abs() < 1e-8);
            }
        }
        let w = recover_weights(&lm.m, &roots);
        for (slot, &c) in order.iter().enumerate() {
            assert!((w[slot] - omega.alpha()[c]).abs() < 1e-8);
        }
    }

    #[test]
    fn full_recovery_from_exact_moments() {
        let (omega, frame) = two_component_instance();
        let lm = population_latent_moments(&omega, &frame, 2).unwrap();
        let res = mom_from_moments(&lm, &frame, 1.0).unwrap();
        let est = res.omega_hat;
        let (a, b) = if (est.theta(0) - omega.theta(0)).norm() < (est.theta(0) - omega.theta(1)).norm() {
            (0, 1)
        } else {
            (1, 0)
        };
        assert!((est.theta(a) - omega.theta(0)).norm() < 1e-6);
        assert!((est.theta(b) - omega.theta(1)).norm() < 1e-6);
        assert!((est.alpha()[a] - 0.3).abs() < 1e-6);
        assert!(res.roots.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn negating_axis_negates_roots() {
        let (omega, frame) = two_component_instance();
        let neg = complete_basis(&(-frame.axis())).unwrap();
        let a = mom_from_moments(&population_latent_moments(&omega, &frame, 2).unwrap(), &frame, 1.0).unwrap();
        let b = mom_from_moments(&population_latent_moments(&omega, &neg, 2).unwrap(), &neg, 1.0).unwrap();
        for (x, y) in a.roots.iter().zip(b.roots.iter().rev()) {
            assert!((x + y).abs() < 1e-8);
        }
        for c in 0..2 {
            let d = (a.omega_hat.theta(c) - b.omega_hat.theta(1 - c)).norm();
            assert!(d < 1e-8);
        }
    }

    #[test]
    fn degenerate_moments_carry_partial_result() {
        // two coincident atoms at 0.5
        let lm = LatentMoments {
            m: vec![1.0, 0.5, 0.25, 0.125],
            mixed: DMatrix::from_row_slice(1, 2, &[0.2, 0.1]),
            k: 2,
            bound: 1.0,
        };
        let frame = complete_basis(&unit(&[1.0, 0.0])).unwrap();
        match mom_from_moments(&lm, &frame, 1.0) {
            Err(Error::MomFailure {
                stage: MomStage::Roots,
                source,
                partial: Some(p),
            }) => {
                assert!(matches!(*source, Error::DegenerateMoments { .. }));
                assert!(p.roots.iter().all(|r| r.abs() <= 1.0 + ROOT_CLIP_SLACK));
                assert!(p.roots.iter().any(|r| (r - 0.5).abs() < 1e-6));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn clipping_applies_to_coordinates() {
        let lm = LatentMoments {
            m: vec![1.0, 0.0],
            mixed: DMatrix::from_column_slice(1, 1, &[1.5]),
            k: 1,
            bound: 1.0,
        };
        assert_eq!(recover_coordinates(&lm, &[0.0], 1.0).unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn single_component_fit_uses_mean_direction() {
        let x = FeatureMatrix::from_rows(&[
            vec![0.1, 0.2],
            vec![-0.4, 0.9],
            vec![1.1, -0.3],
        ])
        .unwrap();
        let counts = SampleCounts::from_counts(&[3, 1, 2]).unwrap();
        let res = mom_fit(&counts, &x, 1, 2.0, &unit(&[1.0, 0.0])).unwrap();
        let mean: Vec<f64> = (0..2)
            .map(|c| (0..3).map(|j| counts.freq()[j] * x.row(j)[c]).sum())
            .collect();
        assert_eq!(res.omega_hat.alpha().as_slice(), &[1.0]);
        for c in 0..2 {
            assert!((res.omega_hat.thetas()[(0, c)] - mean[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn mom_fit_degree_cap_is_not_a_method_failure() {
        let x = FeatureMatrix::from_rows(&[vec![0.1], vec![-0.4]]).unwrap();
        let counts = SampleCounts::from_counts(&[3, 1]).unwrap();
        let e = mom_fit(&counts, &x, 14, 1.0, &unit(&[1.0])).unwrap_err();
        assert!(matches!(e, Error::UnsupportedDegree { .. }));
        assert!(!e.is_method_failure());
    }
}
