//! Hermite polynomials and the latent-moment estimators of the mixing measure.
//!
//! For features drawn from `N(0, I_L)` the functionals `h_r(x) = H_r(xᵀv)` and
//! `h_{r1;i}(x) = H_r(xᵀv)·(xᵀw_i)` have conditional expectation `(vᵀθ)^r` and
//! `(vᵀθ)^r (w_iᵀθ)` under the tilted law `∝ exp(xᵀθ) dμ(x)`, so averaging them over
//! the observed frequencies estimates the moments of `Σ_k α_k δ_{θ_k}`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{check_spd, spd_solve};
use crate::model::{FeatureMatrix, MixtureParams, SampleCounts};

/// Largest moment degree `2K − 1` accepted by default.
pub const DEFAULT_DEGREE_CAP: usize = 25;

/// Probabilists' Hermite polynomial `H_r(x)` via `H_{r+1} = x H_r − r H_{r−1}`.
pub fn hermite_eval(r: usize, x: f64) -> f64 {
    let mut prev = 1.0;
    if r == 0 {
        return prev;
    }
    let mut cur = x;
    for n in 1..r {
        let next = x * cur - n as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Fills `out[r] = H_r(x)` for `r < out.len()`.
pub fn hermite_all(x: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = x;
    }
    for r in 2..out.len() {
        out[r] = x * out[r - 1] - (r - 1) as f64 * out[r - 2];
    }
}

/// Primary axis `v` and an orthonormal completion `W = (w_2, …, w_L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisFrame {
    v: DVector<f64>,
    w: DMatrix<f64>,
}

impl AxisFrame {
    pub fn new(v: DVector<f64>, w: DMatrix<f64>) -> Result<Self> {
        let l = v.len();
        if l == 0 || w.nrows() != l || w.ncols() + 1 != l {
            return Err(Error::invalid(format!(
                "frame of dimension {l} needs an {l}x{} completion",
                l.saturating_sub(1)
            )));
        }
        if (v.norm() - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("frame axis is not a unit vector"));
        }
        let frame = AxisFrame { v, w };
        let r = frame.rotation();
        let gram = r.transpose() * &r;
        if (gram - DMatrix::identity(l, l)).amax() > 1e-10 {
            return Err(Error::invalid("frame columns are not orthonormal"));
        }
        Ok(frame)
    }

    pub fn axis(&self) -> &DVector<f64> {
        &self.v
    }

    pub fn complement(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    /// The `L × L` rotation `[v | W]`.
    pub fn rotation(&self) -> DMatrix<f64> {
        let l = self.dim();
        let mut r = DMatrix::zeros(l, l);
        r.set_column(0, &self.v);
        if l > 1 {
            r.columns_mut(1, l - 1).copy_from(&self.w);
        }
        r
    }
}

/// Estimated or exact latent moments along a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMoments {
    /// `m_0, …, m_{2K−1}`.
    pub m: Vec<f64>,
    /// `(L−1) × K`; row `i−2` holds `m_{01;i}, …, m_{(K−1)1;i}`.
    pub mixed: DMatrix<f64>,
    pub k: usize,
    /// Support bound the moments are meant to live in.
    pub bound: f64,
}

/// Feature distribution for which the moment functionals are known in closed form.
///
/// Coordinates are given in the frame: `coords[0] = xᵀv`, `coords[i] = xᵀw_{i+1}`.
pub trait FeatureLaw: Sync {
    /// Fills `out[r] = h_r(x)`.
    fn axis_functionals(&self, coords: &[f64], out: &mut [f64]);
    /// Fills `out[r] = h_{r1;i}(x)` for the complement column `i` (0-based).
    fn mixed_functionals(&self, coords: &[f64], i: usize, axis: &[f64], out: &mut [f64]);
}

/// `μ = N(0, I_L)`; other Gaussian covariances are handled with [`rescale_for_covariance`].
#[derive(Debug, Clone, Copy, Default)]
pub struct StandardNormal;

impl FeatureLaw for StandardNormal {
    fn axis_functionals(&self, coords: &[f64], out: &mut [f64]) {
        hermite_all(coords[0], out);
    }

    fn mixed_functionals(&self, coords: &[f64], i: usize, axis: &[f64], out: &mut [f64]) {
        let s = coords[i + 1];
        for (o, h) in out.iter_mut().zip(axis) {
            *o = h * s;
        }
    }
}

fn check_degree(k: usize, cap: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let degree = 2 * k - 1;
    if degree > cap {
        return Err(Error::UnsupportedDegree { degree, cap });
    }
    Ok(())
}

/// Sample latent moments for `μ = N(0, I_L)` with the default degree cap.
pub fn estimate_moments(
    counts: &SampleCounts,
    x: &FeatureMatrix,
    frame: &AxisFrame,
    k: usize,
    bound: f64,
) -> Result<LatentMoments> {
    estimate_moments_with(&StandardNormal, counts, x, frame, k, bound, DEFAULT_DEGREE_CAP)
}

pub fn estimate_moments_with<F: FeatureLaw + ?Sized>(
    law: &F,
    counts: &SampleCounts,
    x: &FeatureMatrix,
    frame: &AxisFrame,
    k: usize,
    bound: f64,
    degree_cap: usize,
) -> Result<LatentMoments> {
    check_degree(k, degree_cap)?;
    counts.check_against(x)?;
    if frame.dim() != x.dim() {
        return Err(Error::invalid("frame dimension differs from feature dimension"));
    }
    let l = x.dim();
    let coords = x.matrix() * frame.rotation();
    let mut m = vec![0.0; 2 * k];
    let mut mixed = DMatrix::zeros(l - 1, k);
    let mut row = vec![0.0; l];
    let mut h = vec![0.0; 2 * k];
    let mut hm = vec![0.0; k];
    for (j, &f) in counts.freq().iter().enumerate() {
        if f == 0.0 {
            continue;
        }
        for (c, slot) in row.iter_mut().enumerate() {
            *slot = coords[(j, c)];
        }
        law.axis_functionals(&row, &mut h);
        for (acc, v) in m.iter_mut().zip(&h) {
            *acc += f * v;
        }
        for i in 0..l - 1 {
            law.mixed_functionals(&row, i, &h[..k], &mut hm);
            for r in 0..k {
                mixed[(i, r)] += f * hm[r];
            }
        }
    }
    Ok(LatentMoments {
        m,
        mixed,
        k,
        bound,
    })
}

/// Only the axis moments `m̂_0..m̂_{2K−1}` along `v`, skipping the mixed block.
pub(crate) fn estimate_axis_moments(
    counts: &SampleCounts,
    x: &FeatureMatrix,
    v: &DVector<f64>,
    k: usize,
) -> Result<Vec<f64>> {
    check_degree(k, DEFAULT_DEGREE_CAP)?;
    counts.check_against(x)?;
    let t = x.project(v);
    let mut m = vec![0.0; 2 * k];
    let mut h = vec![0.0; 2 * k];
    for (&f, &tj) in counts.freq().iter().zip(t.iter()) {
        if f == 0.0 {
            continue;
        }
        hermite_all(tj, &mut h);
        for (acc, v) in m.iter_mut().zip(&h) {
            *acc += f * v;
        }
    }
    Ok(m)
}

/// Exact moments of `Σ_k α_k δ_{θ_k}` expressed in the frame.
pub fn population_latent_moments(
    omega_star: &MixtureParams,
    frame: &AxisFrame,
    k: usize,
) -> Result<LatentMoments> {
    if frame.dim() != omega_star.dim() {
        return Err(Error::invalid("frame dimension differs from atom dimension"));
    }
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let l = omega_star.dim();
    let coords = omega_star.thetas() * frame.rotation();
    let mut m = vec![0.0; 2 * k];
    let mut mixed = DMatrix::zeros(l - 1, k);
    for c in 0..omega_star.n_components() {
        let a = omega_star.alpha()[c];
        let t = coords[(c, 0)];
        let mut pow = 1.0;
        for r in 0..2 * k {
            m[r] += a * pow;
            if r < k {
                for i in 0..l - 1 {
                    mixed[(i, r)] += a * pow * coords[(c, i + 1)];
                }
            }
            pow *= t;
        }
    }
    let bound = (0..omega_star.n_components())
        .map(|c| omega_star.theta(c).norm())
        .fold(0.0, f64::max);
    Ok(LatentMoments {
        m,
        mixed,
        k,
        bound,
    })
}

/// Maps atoms estimated under the identity-covariance functionals back to the scale of
/// features drawn from `N(0, Σ)`: every row becomes `Σ⁻¹ θ_k`.
pub fn rescale_for_covariance(thetas: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_spd(sigma)?;
    if sigma.nrows() != thetas.ncols() {
        return Err(Error::invalid("covariance dimension differs from atom dimension"));
    }
    Ok(spd_solve(sigma, &thetas.transpose())?.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mom::complete_basis;
    use rand::Rng;

    fn hermite_closed_form(r: usize, x: f64) -> f64 {
        // r! Σ_b (−1)^b x^{r−2b} / (b! (r−2b)! 2^b)
        let fact = |n: usize| (1..=n).fold(1.0f64, |a, i| a * i as f64);
        let mut s = 0.0;
        for b in 0..=r / 2 {
            let sign = if b % 2 == 0 { 1.0 } else { -1.0 };
            s += sign * x.powi((r - 2 * b) as i32) / (fact(b) * fact(r - 2 * b) * 2f64.powi(b as i32));
        }
        fact(r) * s
    }

    #[test]
    fn hermite_low_degrees() {
        assert_eq!(hermite_eval(0, 3.7), 1.0);
        assert_eq!(hermite_eval(1, 3.7), 3.7);
        assert_eq!(hermite_eval(2, 3.0), 8.0);
        assert_eq!(hermite_eval(3, 2.0), 2.0);
    }

    #[test]
    fn hermite_recurrence_matches_closed_form() {
        let mut rng = crate::rng::Stream::root(1).rng();
        for _ in 0..100 {
            let x: f64 = rng.random_range(-4.0..4.0);
            let mut all = [0.0; 9];
            hermite_all(x, &mut all);
            for r in 0..=8 {
                let a = hermite_eval(r, x);
                let b = hermite_closed_form(r, x);
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "r={r} x={x}: {a} vs {b}");
                assert_eq!(all[r], a);
            }
        }
    }

    fn small_features() -> FeatureMatrix {
        FeatureMatrix::from_rows(&[
            vec![0.0, 1.0, -0.5],
            vec![0.7, -0.3, 0.2],
            vec![-1.1, 0.4, 0.9],
            vec![0.5, 0.5, -1.5],
        ])
        .unwrap()
    }

    #[test]
    fn moments_at_single_point_on_axis_zero() {
        let x = small_features();
        let frame = complete_basis(&DVector::from_vec(vec![1.0, 0.0, 0.0])).unwrap();
        let c = SampleCounts::from_counts(&[5, 0, 0, 0]).unwrap();
        let mom = estimate_moments(&c, &x, &frame, 3, 1.0).unwrap();
        let expect = [1.0, 0.0, -1.0, 0.0, 3.0, 0.0];
        for (a, b) in mom.m.iter().zip(expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn first_moment_is_mean_projection() {
        let x = small_features();
        let v = DVector::from_vec(vec![0.6, 0.0, 0.8]);
        let frame = complete_basis(&v).unwrap();
        let c = SampleCounts::from_counts(&[1, 1, 1, 1]).unwrap();
        let mom = estimate_moments(&c, &x, &frame, 2, 1.0).unwrap();
        let mean: f64 = (0..4).map(|j| x.row(j)[0] * 0.6 + x.row(j)[2] * 0.8).sum::<f64>() / 4.0;
        assert!((mom.m[1] - mean).abs() < 1e-14);
        assert!((mom.m[0] - 1.0).abs() < 1e-14);
        let fast = estimate_axis_moments(&c, &x, &v, 2).unwrap();
        for (a, b) in fast.iter().zip(&mom.m) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn degree_cap_enforced() {
        let x = small_features();
        let frame = complete_basis(&DVector::from_vec(vec![1.0, 0.0, 0.0])).unwrap();
        let c = SampleCounts::from_counts(&[1, 1, 1, 1]).unwrap();
        assert!(matches!(
            estimate_moments(&c, &x, &frame, 14, 1.0),
            Err(Error::UnsupportedDegree { degree: 27, cap: 25 })
        ));
        assert!(estimate_moments(&c, &x, &frame, 13, 1.0).is_ok());
    }

    #[test]
    fn population_moments_cases() {
        let frame = complete_basis(&DVector::from_vec(vec![1.0, 0.0])).unwrap();
        let single = MixtureParams::from_rows(vec![1.0], &[vec![0.4, -0.2]]).unwrap();
        let m = population_latent_moments(&single, &frame, 3).unwrap();
        for r in 0..6 {
            assert!((m.m[r] - 0.4f64.powi(r as i32)).abs() < 1e-15);
        }
        let sym = MixtureParams::from_rows(vec![0.5, 0.5], &[vec![0.7, 0.0], vec![-0.7, 0.0]]).unwrap();
        let m = population_latent_moments(&sym, &frame, 2).unwrap();
        for r in 0..4 {
            let expect = if r % 2 == 0 { 0.7f64.powi(r as i32) } else { 0.0 };
            assert!((m.m[r] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn population_moments_match_direct_sum() {
        let v = DVector::from_vec(vec![0.48, 0.6, 0.64]);
        let frame = complete_basis(&v).unwrap();
        let rows = [vec![0.3, -0.2, 0.5], vec![-0.6, 0.1, 0.2], vec![0.1, 0.9, -0.4]];
        let alpha = vec![0.2, 0.5, 0.3];
        let omega = MixtureParams::from_rows(alpha.clone(), &rows).unwrap();
        let m = population_latent_moments(&omega, &frame, 3).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let vv: Vec<f64> = v.iter().copied().collect();
        for r in 0..6 {
            let direct: f64 = (0..3).map(|k| alpha[k] * dot(&rows[k], &vv).powi(r as i32)).sum();
            assert!((m.m[r] - direct).abs() < 1e-14);
        }
        for i in 0..2 {
            let w: Vec<f64> = frame.complement().column(i).iter().copied().collect();
            for r in 0..3 {
                let direct: f64 = (0..3)
                    .map(|k| alpha[k] * dot(&rows[k], &vv).powi(r as i32) * dot(&rows[k], &w))
                    .sum();
                assert!((m.mixed[(i, r)] - direct).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn moments_are_linear_in_frequencies() {
        let x = small_features();
        let frame = complete_basis(&DVector::from_vec(vec![0.0, 0.6, 0.8])).unwrap();
        let a = SampleCounts::from_counts(&[1, 2, 3, 4]).unwrap();
        let b = SampleCounts::from_counts(&[4, 0, 1, 5]).unwrap();
        let mix: Vec<f64> = a.freq().iter().zip(b.freq()).map(|(u, v)| 0.3 * u + 0.7 * v).collect();
        let c = SampleCounts::from_freq(mix, 0).unwrap();
        let ma = estimate_moments(&a, &x, &frame, 2, 1.0).unwrap();
        let mb = estimate_moments(&b, &x, &frame, 2, 1.0).unwrap();
        let mc = estimate_moments(&c, &x, &frame, 2, 1.0).unwrap();
        for r in 0..4 {
            assert!((mc.m[r] - (0.3 * ma.m[r] + 0.7 * mb.m[r])).abs() < 1e-13);
        }
        let lin = &ma.mixed * 0.3 + &mb.mixed * 0.7;
        assert!((mc.mixed - lin).amax() < 1e-13);
    }

    #[test]
    fn frame_rotation_equivariance() {
        let x = small_features();
        let frame = complete_basis(&DVector::from_vec(vec![0.6, 0.0, 0.8])).unwrap();
        let (s, c) = (0.3f64.sin(), 0.3f64.cos());
        let q = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let rotated = AxisFrame::new(frame.axis().clone(), frame.complement() * &q).unwrap();
        let counts = SampleCounts::from_counts(&[2, 1, 4, 3]).unwrap();
        let a = estimate_moments(&counts, &x, &frame, 2, 1.0).unwrap();
        let b = estimate_moments(&counts, &x, &rotated, 2, 1.0).unwrap();
        for r in 0..4 {
            assert!((a.m[r] - b.m[r]).abs() < 1e-14);
        }
        assert!((q.transpose() * &a.mixed - b.mixed).amax() < 1e-13);
    }

    #[test]
    fn rescale_cases() {
        let t = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 3.0]);
        assert!((rescale_for_covariance(&t, &DMatrix::identity(2, 2)).unwrap() - &t).amax() < 1e-15);
        let half = rescale_for_covariance(&t, &(DMatrix::identity(2, 2) * 2.0)).unwrap();
        assert!((half - &t * 0.5).amax() < 1e-15);
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.7, 0.7, 1.3]);
        let r = rescale_for_covariance(&t, &sigma).unwrap();
        assert!(((&sigma * r.transpose()).transpose() - &t).amax() < 1e-10);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(rescale_for_covariance(&t, &bad), Err(Error::InvalidInput(_))));
    }
}
