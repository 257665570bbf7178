//! Euclidean projection of a moment vector onto the moment space of `[−B, B]`.
//!
//! A vector `(1, u_1, …, u_{2K−1})` is the moment sequence of a probability measure on
//! `[−B, B]` iff the localizing matrices `B·H + S` and `B·H − S` are positive
//! semidefinite, with `H_{ij} = u_{i+j}` and `S_{ij} = u_{i+j+1}` (`0 ≤ i, j < K`).
//! The projection is the solution of a small semidefinite program. It is solved first
//! with over-relaxed ADMM on the splitting `G_±(u) = Z_±, Z_± ⪰ 0`; inputs far outside
//! the moment space (high-degree sample moments) make ADMM's tail sublinear, and for
//! those a log-det barrier method with a duality-gap certificate takes over. A short
//! move towards an interior point removes residual infeasibility.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{min_sym_eigenvalue, project_psd};

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionOptions {
    /// Total budget over ADMM iterations and barrier Newton steps.
    pub max_iters: usize,
    /// ADMM iterations before switching to the barrier method.
    pub admm_iters: usize,
    /// Relative residual tolerance (scaled by the moment magnitudes).
    pub tol: f64,
    /// Barrier stopping bound on `½‖u − m‖² − min`, which also bounds `½‖u − u*‖²`.
    pub barrier_gap: f64,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        ProjectionOptions {
            max_iters: 20_000,
            admm_iters: 500,
            tol: 1e-11,
            barrier_gap: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionOutcome {
    pub moments: Vec<f64>,
    pub iterations: usize,
    /// Smallest eigenvalue over both localizing matrices at the output.
    pub min_eigenvalue: f64,
}

/// Hankel matrix `H_{ij} = m_{i+j}` and its shift `S_{ij} = m_{i+j+1}`, both `K × K`.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelPair {
    pub h: DMatrix<f64>,
    pub s: DMatrix<f64>,
}

impl HankelPair {
    pub fn from_moments(m: &[f64]) -> Result<Self> {
        if m.len() < 2 || !m.len().is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "moment vector must have even length 2K >= 2, got {}",
                m.len()
            )));
        }
        let k = m.len() / 2;
        let h = DMatrix::from_fn(k, k, |i, j| m[i + j]);
        let s = DMatrix::from_fn(k, k, |i, j| m[i + j + 1]);
        Ok(HankelPair { h, s })
    }

    /// `(λ_min(B·H + S), λ_min(B·H − S))`.
    pub fn localizing_min_eigenvalues(&self, bound: f64) -> (f64, f64) {
        let bh = &self.h * bound;
        (
            min_sym_eigenvalue(&(&bh + &self.s)),
            min_sym_eigenvalue(&(&bh - &self.s)),
        )
    }
}

fn min_localizing_eig(m: &[f64], bound: f64) -> f64 {
    let pair = HankelPair::from_moments(m).expect("validated length");
    let (a, b) = pair.localizing_min_eigenvalues(bound);
    a.min(b)
}

/// Moments of the uniform distribution on `[−B, B]`; strictly inside the moment space.
fn interior_point(n: usize, bound: f64) -> Vec<f64> {
    (0..n)
        .map(|r| {
            if r % 2 == 0 {
                bound.powi(r as i32) / (r + 1) as f64
            } else {
                0.0
            }
        })
        .collect()
}

/// Linear part of `u ↦ (B·H(u) + σ S(u))` restricted to `u_1..u_{2K−1}`.
struct LocalizingMaps {
    /// `basis[σ][r−1]` is the matrix multiplying `u_r`.
    basis: [Vec<DMatrix<f64>>; 2],
    constant: DMatrix<f64>,
    gram: DMatrix<f64>,
}

impl LocalizingMaps {
    fn new(k: usize, bound: f64) -> Self {
        let n = 2 * k - 1;
        let mk = |sigma: f64, r: usize| {
            DMatrix::from_fn(k, k, |i, j| {
                let mut v = 0.0;
                if i + j == r {
                    v += bound;
                }
                if i + j + 1 == r {
                    v += sigma;
                }
                v
            })
        };
        let basis = [
            (1..=n).map(|r| mk(1.0, r)).collect::<Vec<_>>(),
            (1..=n).map(|r| mk(-1.0, r)).collect::<Vec<_>>(),
        ];
        let mut constant = DMatrix::zeros(k, k);
        constant[(0, 0)] = bound;
        let gram = DMatrix::from_fn(n, n, |r, s| {
            basis
                .iter()
                .map(|b| b[r].component_mul(&b[s]).sum())
                .sum::<f64>()
        });
        LocalizingMaps {
            basis,
            constant,
            gram,
        }
    }

    fn apply(&self, side: usize, u: &DVector<f64>) -> DMatrix<f64> {
        let mut g = self.constant.clone();
        for (r, e) in self.basis[side].iter().enumerate() {
            if u[r] != 0.0 {
                g += e * u[r];
            }
        }
        g
    }

    fn adjoint(&self, side: usize, z: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.basis[side].len(),
            self.basis[side].iter().map(|e| e.component_mul(z).sum()),
        )
    }
}

/// Nearest valid moment vector on `[−B, B]`; see [`project_to_valid_moments_with`].
pub fn project_to_valid_moments(m: &[f64], bound: f64) -> Result<Vec<f64>> {
    Ok(project_to_valid_moments_with(m, bound, &ProjectionOptions::default())?.moments)
}

pub fn project_to_valid_moments_with(
    m: &[f64],
    bound: f64,
    opts: &ProjectionOptions,
) -> Result<ProjectionOutcome> {
    HankelPair::from_moments(m)?;
    if !(bound > 0.0) || !bound.is_finite() {
        return Err(Error::invalid("support bound must be positive"));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("moments must be finite"));
    }
    if (m[0] - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("zeroth moment is {}, expected 1", m[0])));
    }
    let mut target = m.to_vec();
    target[0] = 1.0;
    let eig0 = min_localizing_eig(&target, bound);
    if eig0 >= 0.0 {
        return Ok(ProjectionOutcome {
            moments: target,
            iterations: 0,
            min_eigenvalue: eig0,
        });
    }

    let k = m.len() / 2;
    let n = 2 * k - 1;
    let maps = LocalizingMaps::new(k, bound);
    let goal = DVector::from_column_slice(&target[1..]);
    let scale = 1.0 + goal.amax();

    let mut rho = 1.0;
    let mut solve = factor(&maps.gram, rho);
    let mut u = goal.clone();
    let mut z = [project_psd(&maps.apply(0, &u)), project_psd(&maps.apply(1, &u))];
    let mut dual = [DMatrix::zeros(k, k), DMatrix::zeros(k, k)];
    let relax = 1.6;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.admm_iters.min(opts.max_iters) {
        iterations += 1;
        let mut rhs = goal.clone();
        for side in 0..2 {
            let shifted = &z[side] - &dual[side] - &maps.constant;
            rhs += maps.adjoint(side, &shifted) * rho;
        }
        u = &solve * rhs;

        let mut prim_sq = 0.0;
        let mut dual_change = DVector::zeros(n);
        for side in 0..2 {
            let g = maps.apply(side, &u);
            let g_relaxed = &g * relax + &z[side] * (1.0 - relax);
            let z_new = project_psd(&(&g_relaxed + &dual[side]));
            dual[side] += &g_relaxed - &z_new;
            prim_sq += (&g - &z_new).norm_squared();
            dual_change += maps.adjoint(side, &(&z_new - &z[side]));
            z[side] = z_new;
        }
        let prim = prim_sq.sqrt();
        let dres = rho * dual_change.norm();
        if prim <= opts.tol * scale && dres <= opts.tol * scale {
            converged = true;
            break;
        }
        if iterations % 25 == 0 {
            let new_rho = if prim > 10.0 * dres {
                rho * 2.0
            } else if dres > 10.0 * prim {
                rho / 2.0
            } else {
                rho
            };
            if new_rho != rho {
                let ratio = rho / new_rho;
                dual.iter_mut().for_each(|d| *d *= ratio);
                rho = new_rho;
                solve = factor(&maps.gram, rho);
            }
        }
    }

    if !converged {
        let budget = opts.max_iters.saturating_sub(iterations);
        let (v, steps, ok) = barrier_solve(&maps, &goal, k, bound, opts.barrier_gap, budget);
        iterations += steps;
        if ok {
            u = v;
            converged = true;
        }
    }
    let mut out = Vec::with_capacity(2 * k);
    out.push(1.0);
    out.extend(u.iter().copied());
    if !converged {
        let infeasibility = (-min_localizing_eig(&out, bound)).max(0.0);
        return Err(Error::ProjectionFailure { infeasibility });
    }
    let out = pull_inside(&out, bound);
    let min_eigenvalue = min_localizing_eig(&out, bound);
    Ok(ProjectionOutcome {
        moments: out,
        iterations,
        min_eigenvalue,
    })
}

/// Inverse Cholesky factor of `G`, or `None` when `G` is not positive definite.
fn inverse_factor(g: &DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    let chol = g.clone().cholesky()?;
    let l = chol.l();
    let logdet = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let n = g.nrows();
    let linv = l.solve_lower_triangular(&DMatrix::identity(n, n))?;
    Some((linv, logdet))
}

/// `Σ_± log det G_±(u)`, or `None` outside the interior.
fn log_barrier(maps: &LocalizingMaps, u: &DVector<f64>) -> Option<f64> {
    let mut v = 0.0;
    for side in 0..2 {
        v += inverse_factor(&maps.apply(side, u))?.1;
    }
    Some(v)
}

/// Barrier path from the uniform-measure moments. Returns the final point, the Newton
/// steps taken, and whether the gap bound `2K / t` reached `gap`.
fn barrier_solve(
    maps: &LocalizingMaps,
    goal: &DVector<f64>,
    k: usize,
    bound: f64,
    gap: f64,
    budget: usize,
) -> (DVector<f64>, usize, bool) {
    let n = goal.len();
    let start = interior_point(n + 1, bound);
    let mut u = DVector::from_column_slice(&start[1..]);
    let barrier_dim = 2.0 * k as f64;
    let mut t = barrier_dim / (0.5 * (&u - goal).norm_squared()).max(1e-300);
    let mut steps = 0;
    loop {
        // centering by damped Newton
        let mut centred = false;
        let mut inner = 0;
        while steps < budget {
            steps += 1;
            inner += 1;
            let mut grad = (&u - goal) * t;
            let mut hess = DMatrix::<f64>::identity(n, n) * t;
            for side in 0..2 {
                let Some((linv, _)) = inverse_factor(&maps.apply(side, &u)) else {
                    return (u, steps, false);
                };
                let p: Vec<DMatrix<f64>> = maps.basis[side]
                    .iter()
                    .map(|e| &linv * e * linv.transpose())
                    .collect();
                for r in 0..n {
                    grad[r] -= p[r].trace();
                    for s in 0..=r {
                        let h = p[r].dot(&p[s]);
                        hess[(r, s)] += h;
                        if s != r {
                            hess[(s, r)] += h;
                        }
                    }
                }
            }
            let Some(chol) = hess.cholesky() else {
                return (u, steps, false);
            };
            let dir = -chol.solve(&grad);
            let decrement = -grad.dot(&dir);
            if decrement <= 1e-7 || inner >= 50 {
                centred = true;
                break;
            }
            let Some(ld0) = log_barrier(maps, &u) else {
                return (u, steps, false);
            };
            let mut s = 1.0;
            let next = loop {
                let cand = &u + &dir * s;
                if let Some(ld) = log_barrier(maps, &cand) {
                    // φ(cand) − φ(u) without forming the large quadratic terms
                    let mid = (&cand + &u) * 0.5 - goal;
                    let change = t * (&dir * s).dot(&mid) - (ld - ld0);
                    if change < 0.0 && change <= -0.25 * s * decrement {
                        break Some(cand);
                    }
                }
                s *= 0.5;
                if s < 1e-6 {
                    break None;
                }
            };
            match next {
                Some(c) => u = c,
                // no further progress is representable at this t
                None => {
                    centred = true;
                    break;
                }
            }
        }
        if !centred {
            return (u, steps, false);
        }
        if barrier_dim / t <= gap {
            return (u, steps, true);
        }
        t *= 10.0;
    }
}

fn factor(gram: &DMatrix<f64>, rho: f64) -> DMatrix<f64> {
    let n = gram.nrows();
    let a = DMatrix::identity(n, n) + gram * rho;
    a.cholesky()
        .expect("I + ρ AᵀA is positive definite")
        .inverse()
}

/// Moves `u` along the segment to the uniform-measure moments just far enough that both
/// localizing matrices are positive semidefinite.
fn pull_inside(u: &[f64], bound: f64) -> Vec<f64> {
    if min_localizing_eig(u, bound) >= 0.0 {
        return u.to_vec();
    }
    let c = interior_point(u.len(), bound);
    let mix = |t: f64| -> Vec<f64> { u.iter().zip(&c).map(|(a, b)| (1.0 - t) * a + t * b).collect() };
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if min_localizing_eig(&mix(mid), bound) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut out = mix(hi);
    out[0] = 1.0;
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn atom_moments(atoms: &[f64], weights: &[f64], k: usize) -> Vec<f64> {
        (0..2 * k)
            .map(|r| atoms.iter().zip(weights).map(|(t, w)| w * t.powi(r as i32)).sum())
            .collect()
    }

    #[test]
    fn valid_input_returned_unchanged() {
        let m = vec![1.0, 0.0, 0.0, 0.0];
        assert_eq!(project_to_valid_moments(&m, 1.0).unwrap(), m);
        let m = atom_moments(&[-0.5, 0.2, 0.9], &[0.3, 0.3, 0.4], 3);
        let out = project_to_valid_moments(&m, 1.0).unwrap();
        for (a, b) in out.iter().zip(&m) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn single_component_is_clipping() {
        let out = project_to_valid_moments(&[1.0, 1.7], 1.0).unwrap();
        assert!((out[1] - 1.0).abs() < 1e-9);
        let out = project_to_valid_moments(&[1.0, -2.5], 2.0).unwrap();
        assert!((out[1] + 2.0).abs() < 1e-9);
    }

    #[test]
    fn negative_second_moment_projects_to_origin_atom() {
        let out = project_to_valid_moments(&[1.0, 0.0, -0.5, 0.0], 1.0).unwrap();
        assert!(out[2] >= 0.0);
        let pair = HankelPair::from_moments(&out).unwrap();
        let (a, b) = pair.localizing_min_eigenvalues(1.0);
        assert!(a >= -1e-8 && b >= -1e-8);
        for v in &out[1..] {
            assert!(v.abs() < 1e-6, "{out:?}");
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(project_to_valid_moments(&[1.0, 0.0, 0.0], 1.0).is_err());
        assert!(project_to_valid_moments(&[0.5, 0.0], 1.0).is_err());
        assert!(project_to_valid_moments(&[1.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn barrier_agrees_with_admm() {
        let base = atom_moments(&[-0.8, 0.1, 0.7], &[0.2, 0.5, 0.3], 3);
        let noise = [0.0, 0.05, -0.08, 0.11, 0.07, -0.06];
        let m: Vec<f64> = base.iter().zip(noise).map(|(a, b)| a + b).collect();
        let admm = ProjectionOptions {
            admm_iters: 20_000,
            ..ProjectionOptions::default()
        };
        let barrier = ProjectionOptions {
            admm_iters: 0,
            ..ProjectionOptions::default()
        };
        let a = project_to_valid_moments_with(&m, 1.0, &admm).unwrap();
        let b = project_to_valid_moments_with(&m, 1.0, &barrier).unwrap();
        assert!(a.iterations < 20_000);
        assert!(b.min_eigenvalue >= 0.0);
        let gap = a.moments.iter().zip(&b.moments).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-6, "gap {gap:e}");
    }

    #[test]
    fn far_outside_input_is_projected() {
        // magnitudes typical of degree-19 sample moments
        let mut m = vec![1.0];
        m.extend((1..20).map(|r| (-1.0f64).powi(r / 2) * 3.0f64.powi(r) / 50.0));
        let out = project_to_valid_moments_with(&m, 1.0, &ProjectionOptions::default()).unwrap();
        assert!(out.min_eigenvalue >= -1e-8);
        assert!(out.moments.iter().all(|v| v.abs() <= 1.0 + 1e-9));
    }

    #[test]
    fn hankel_pair_layout() {
        let p = HankelPair::from_moments(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(p.h, DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 3.0, 4.0, 3.0, 4.0, 5.0]));
        assert_eq!(p.s, DMatrix::from_row_slice(3, 3, &[2.0, 3.0, 4.0, 3.0, 4.0, 5.0, 4.0, 5.0, 6.0]));
    }
}
