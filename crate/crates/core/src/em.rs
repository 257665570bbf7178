//! Hybrid EM: closed-form weight update and one gradient-ascent step per atom.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::neumaier_sum;
use crate::model::{mixture_pmf, Evaluation, FeatureMatrix, MixtureParams, SampleCounts};

/// Weights below this value are raised to it before an EM run starts.
pub const ALPHA_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    /// Shared gradient step `η`.
    pub step_size: f64,
    /// Optional per-component steps; overrides `step_size` when set.
    pub step_sizes: Option<Vec<f64>>,
    pub max_iters: usize,
    /// Threshold on `|ℓ_t − ℓ_{t−1}| / max(1, |ℓ_{t−1}|)`.
    pub rel_tol: f64,
    pub track_trace: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            step_size: 0.2,
            step_sizes: None,
            max_iters: 500,
            rel_tol: 1e-6,
            track_trace: true,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return Err(Error::invalid("step_size must be finite and nonnegative"));
        }
        if let Some(steps) = &self.step_sizes {
            if steps.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
                return Err(Error::invalid("step_sizes must be finite and nonnegative"));
            }
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::invalid("rel_tol must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        Ok(())
    }

    fn step_for(&self, k: usize) -> Result<f64> {
        match &self.step_sizes {
            Some(steps) => steps
                .get(k)
                .copied()
                .ok_or_else(|| Error::invalid(format!("no step size for component {k}"))),
            None => Ok(self.step_size),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmResult {
    pub omega_hat: MixtureParams,
    pub iters_used: usize,
    /// `ℓ_N` at every iterate including the start; empty unless tracing was requested.
    pub loglik_trace: Vec<f64>,
    pub final_loglik: f64,
    pub converged: bool,
    /// Set when an initial weight had to be raised to [`ALPHA_FLOOR`].
    pub alpha_floored: bool,
}

/// Weighted responsibilities `π̂_j g(θ_k | x_j; ω)`, `p × K`.
fn weighted_responsibilities(counts: &SampleCounts, ev: &Evaluation) -> Result<DMatrix<f64>> {
    let mut w = ev.responsibilities()?;
    for (j, mut row) in w.row_iter_mut().enumerate() {
        row *= counts.freq()[j];
    }
    Ok(w)
}

fn column_masses(w: &DMatrix<f64>) -> Vec<f64> {
    w.column_iter()
        .map(|c| neumaier_sum(c.iter().copied()))
        .collect()
}

/// `∇_{θ_k} Q̂` for all `k` as the columns of an `L × K` matrix.
fn gradient_matrix(x: &FeatureMatrix, ev: &Evaluation, w: &DMatrix<f64>, mass: &[f64]) -> DMatrix<f64> {
    let mut resid = w.clone();
    for (k, mut col) in resid.column_iter_mut().enumerate() {
        for (j, v) in col.iter_mut().enumerate() {
            *v -= mass[k] * ev.log_a[(j, k)].exp();
        }
    }
    x.matrix().transpose() * resid
}

fn check_inputs(counts: &SampleCounts, x: &FeatureMatrix, omega: &MixtureParams) -> Result<()> {
    counts.check_against(x)?;
    if omega.dim() != x.dim() {
        return Err(Error::invalid(format!(
            "atoms have dimension {} but features have dimension {}",
            omega.dim(),
            x.dim()
        )));
    }
    Ok(())
}

/// Surrogate `Q̂(ω | ω′)` with responsibilities taken at `ω′`.
pub fn q_function(
    counts: &SampleCounts,
    x: &FeatureMatrix,
    omega: &MixtureParams,
    omega_prev: &MixtureParams,
) -> Result<f64> {
    check_inputs(counts, x, omega)?;
    check_inputs(counts, x, omega_prev)?;
    if omega.n_components() != omega_prev.n_components() {
        return Err(Error::invalid("component counts differ"));
    }
    let prev = Evaluation::new(x, omega_prev)?;
    let w = weighted_responsibilities(counts, &prev)?;
    let mass = column_masses(&w);
    let cur = Evaluation::new(x, omega)?;
    let mut terms = Vec::with_capacity(w.len() + mass.len());
    for (k, &m) in mass.iter().enumerate() {
        if m > 0.0 {
            if omega.alpha()[k] <= 0.0 {
                return Err(Error::NumericDegeneracy(format!(
                    "component {k} has zero weight but responsibility mass {m:e}"
                )));
            }
            terms.push(m * cur.log_alpha[k]);
        }
        for j in 0..x.n_points() {
            let wjk = w[(j, k)];
            if wjk > 0.0 {
                terms.push(wjk * cur.log_a[(j, k)]);
            }
        }
    }
    Ok(neumaier_sum(terms))
}

/// Closed-form weight update `α_k⁺ = Σ_j π̂_j g(θ_k | x_j; ω)`.
pub fn update_alpha(counts: &SampleCounts, x: &FeatureMatrix, omega: &MixtureParams) -> Result<Vec<f64>> {
    check_inputs(counts, x, omega)?;
    let ev = Evaluation::new(x, omega)?;
    let w = weighted_responsibilities(counts, &ev)?;
    Ok(normalize(column_masses(&w)))
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let s = neumaier_sum(v.iter().copied());
    v.iter_mut().for_each(|a| *a /= s);
    v
}

/// `∇_{θ_k} Q̂(ω | ω)` = `Σ_j π̂_j g(θ_k | x_j; ω) (x_j − Xᵀ A(θ_k))`.
pub fn grad_q_theta(
    counts: &SampleCounts,
    x: &FeatureMatrix,
    omega: &MixtureParams,
    k: usize,
) -> Result<DVector<f64>> {
    check_inputs(counts, x, omega)?;
    if k >= omega.n_components() {
        return Err(Error::invalid(format!(
            "component {k} out of range for K = {}",
            omega.n_components()
        )));
    }
    let ev = Evaluation::new(x, omega)?;
    let w = weighted_responsibilities(counts, &ev)?;
    let mass = column_masses(&w);
    Ok(gradient_matrix(x, &ev, &w, &mass).column(k).into_owned())
}

fn step_from_evaluation(
    counts: &SampleCounts,
    x: &FeatureMatrix,
    omega: &MixtureParams,
    ev: &Evaluation,
    config: &EmConfig,
) -> Result<MixtureParams> {
    let w = weighted_responsibilities(counts, ev)?;
    let mass = column_masses(&w);
    let grad = gradient_matrix(x, ev, &w, &mass);
    let mut thetas = omega.thetas().clone();
    for k in 0..omega.n_components() {
        let eta = config.step_for(k)?;
        let mut row = thetas.row_mut(k);
        row += grad.column(k).transpose() * eta;
    }
    MixtureParams::new(normalize(mass), thetas)
}

/// One simultaneous update of `α` and every `θ_k`, all evaluated at the incoming `ω`.
pub fn em_step(
    counts: &SampleCounts,
    x: &FeatureMatrix,
    omega: &MixtureParams,
    config: &EmConfig,
) -> Result<MixtureParams> {
    config.validate()?;
    check_inputs(counts, x, omega)?;
    let ev = Evaluation::new(x, omega)?;
    step_from_evaluation(counts, x, omega, &ev, config)
}

fn apply_alpha_floor(omega: &MixtureParams) -> Result<(MixtureParams, bool)> {
    if omega.alpha().iter().all(|&a| a >= ALPHA_FLOOR) {
        return Ok((omega.clone(), false));
    }
    let alpha = normalize(omega.alpha().iter().map(|a| a.max(ALPHA_FLOOR)).collect());
    Ok((MixtureParams::new(alpha, omega.thetas().clone())?, true))
}

/// Iterates [`em_step`] until the relative log-likelihood change drops below
/// `config.rel_tol` or `config.max_iters` steps have been taken.
pub fn em_fit(
    counts: &SampleCounts,
    x: &FeatureMatrix,
    omega0: &MixtureParams,
    config: &EmConfig,
) -> Result<EmResult> {
    config.validate()?;
    check_inputs(counts, x, omega0)?;
    let (mut omega, alpha_floored) = apply_alpha_floor(omega0)?;
    let mut ev = Evaluation::new(x, &omega)?;
    let mut ll = ev
        .log_likelihood(counts)
        .map_err(|_| Error::NonFiniteLikelihood { iteration: 0 })?;
    if !ll.is_finite() {
        return Err(Error::NonFiniteLikelihood { iteration: 0 });
    }
    let mut trace = Vec::new();
    if config.track_trace {
        trace.push(ll);
    }
    let mut converged = false;
    let mut iters = 0;
    while iters < config.max_iters {
        iters += 1;
        let next = step_from_evaluation(counts, x, &omega, &ev, config)
            .map_err(|_| Error::NonFiniteLikelihood { iteration: iters })?;
        ev = Evaluation::new(x, &next)?;
        let next_ll = ev
            .log_likelihood(counts)
            .map_err(|_| Error::NonFiniteLikelihood { iteration: iters })?;
        if !next_ll.is_finite() {
            return Err(Error::NonFiniteLikelihood { iteration: iters });
        }
        if config.track_trace {
            trace.push(next_ll);
        }
        let rel = (next_ll - ll).abs() / ll.abs().max(1.0);
        omega = next;
        ll = next_ll;
        if rel < config.rel_tol {
            converged = true;
            break;
        }
    }
    Ok(EmResult {
        omega_hat: omega,
        iters_used: iters,
        loglik_trace: trace,
        final_loglik: ll,
        converged,
        alpha_floored,
    })
}

/// Population-limit frequencies `π(x_j; ω*)`, marked with `n_samples = 0`.
pub fn population_counts(x: &FeatureMatrix, omega_star: &MixtureParams) -> Result<SampleCounts> {
    let pi = mixture_pmf(x, omega_star)?;
    let s = neumaier_sum(pi.iter().copied());
    SampleCounts::population(pi.into_iter().map(|v| v / s).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{log_likelihood, responsibilities, softmax_component};

    fn instance() -> (FeatureMatrix, MixtureParams, SampleCounts) {
        let x = FeatureMatrix::from_rows(&[
            vec![0.3, -1.1],
            vec![1.4, 0.2],
            vec![-0.6, 0.9],
            vec![0.0, 0.5],
            vec![-1.2, -0.4],
        ])
        .unwrap();
        let omega = MixtureParams::from_rows(vec![0.35, 0.65], &[vec![0.8, -0.3], vec![-0.5, 1.1]]).unwrap();
        let counts = SampleCounts::from_counts(&[7, 3, 9, 4, 2]).unwrap();
        (x, omega, counts)
    }

    #[test]
    fn q_equals_loglik_for_single_component() {
        let (x, _, c) = instance();
        let a = MixtureParams::from_rows(vec![1.0], &[vec![0.4, -0.2]]).unwrap();
        let b = MixtureParams::from_rows(vec![1.0], &[vec![-1.0, 2.0]]).unwrap();
        let q = q_function(&c, &x, &a, &b).unwrap();
        assert!((q - log_likelihood(&c, &x, &a).unwrap()).abs() < 1e-13);
    }

    #[test]
    fn em_decomposition_identity() {
        let (x, omega, c) = instance();
        let q = q_function(&c, &x, &omega, &omega).unwrap();
        let g = responsibilities(&x, &omega).unwrap();
        let mut h = 0.0;
        for j in 0..x.n_points() {
            for k in 0..2 {
                let v = g[(k, j)];
                if v > 0.0 {
                    h -= c.freq()[j] * v * v.ln();
                }
            }
        }
        let l = log_likelihood(&c, &x, &omega).unwrap();
        assert!((l - (q + h)).abs() < 1e-13, "{l} vs {}", q + h);
    }

    #[test]
    fn q_is_midpoint_concave_in_alpha() {
        let (x, omega, c) = instance();
        let t = omega.thetas().clone();
        let a = MixtureParams::new(vec![0.1, 0.9], t.clone()).unwrap();
        let b = MixtureParams::new(vec![0.8, 0.2], t.clone()).unwrap();
        let m = MixtureParams::new(vec![0.45, 0.55], t).unwrap();
        let qa = q_function(&c, &x, &a, &omega).unwrap();
        let qb = q_function(&c, &x, &b, &omega).unwrap();
        let qm = q_function(&c, &x, &m, &omega).unwrap();
        assert!(qm >= 0.5 * (qa + qb) - 1e-14);
    }

    #[test]
    fn q_zero_weight_with_mass_is_degenerate() {
        let (x, omega, c) = instance();
        let zero = MixtureParams::new(vec![1.0, 0.0], omega.thetas().clone()).unwrap();
        assert!(matches!(
            q_function(&c, &x, &zero, &omega),
            Err(Error::NumericDegeneracy(_))
        ));
    }

    #[test]
    fn update_alpha_cases() {
        let (x, omega, c) = instance();
        let t = omega.theta(0);
        let twin = MixtureParams::new(
            vec![0.3, 0.7],
            DMatrix::from_rows(&[t.transpose(), t.transpose()]),
        )
        .unwrap();
        let a = update_alpha(&c, &x, &twin).unwrap();
        assert!((a[0] - 0.3).abs() < 1e-14 && (a[1] - 0.7).abs() < 1e-14);
        let single = MixtureParams::from_rows(vec![1.0], &[vec![0.1, 0.2]]).unwrap();
        assert_eq!(update_alpha(&c, &x, &single).unwrap(), vec![1.0]);
    }

    #[test]
    fn update_alpha_matches_direct_sum() {
        let x = FeatureMatrix::from_rows(&[vec![1.0], vec![0.0], vec![-1.0]]).unwrap();
        let omega = MixtureParams::from_rows(vec![0.4, 0.6], &[vec![1.0], vec![-0.5]]).unwrap();
        let c = SampleCounts::from_counts(&[5, 3, 2]).unwrap();
        let a1 = softmax_component(&x, &[1.0]).unwrap();
        let a2 = softmax_component(&x, &[-0.5]).unwrap();
        let mut expect = 0.0;
        for j in 0..3 {
            let pi = 0.4 * a1[j] + 0.6 * a2[j];
            expect += c.freq()[j] * 0.4 * a1[j] / pi;
        }
        let a = update_alpha(&c, &x, &omega).unwrap();
        assert!((a[0] - expect).abs() < 1e-14);
        assert!((a[0] + a[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gradient_zero_at_single_softmax_truth() {
        let (x, _, _) = instance();
        let theta = [0.6, -0.9];
        let c = SampleCounts::population(softmax_component(&x, &theta).unwrap()).unwrap();
        let omega = MixtureParams::from_rows(vec![1.0], &[theta.to_vec()]).unwrap();
        let g = grad_q_theta(&c, &x, &omega, 0).unwrap();
        assert!(g.amax() < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (x, omega, c) = instance();
        let h = 1e-5;
        for k in 0..2 {
            let g = grad_q_theta(&c, &x, &omega, k).unwrap();
            for l in 0..2 {
                let mut plus = omega.thetas().clone();
                plus[(k, l)] += h;
                let mut minus = omega.thetas().clone();
                minus[(k, l)] -= h;
                let qp = q_function(&c, &x, &MixtureParams::new(omega.alpha().as_slice().to_vec(), plus).unwrap(), &omega).unwrap();
                let qm = q_function(&c, &x, &MixtureParams::new(omega.alpha().as_slice().to_vec(), minus).unwrap(), &omega).unwrap();
                let fd = (qp - qm) / (2.0 * h);
                assert!((fd - g[l]).abs() <= 1e-5 * g[l].abs().max(1e-3), "{fd} vs {}", g[l]);
            }
        }
    }

    #[test]
    fn gradient_relabeling_invariant() {
        let (x, omega, c) = instance();
        let perm = [4usize, 2, 0, 3, 1];
        let xp = FeatureMatrix::new(x.matrix().select_rows(&perm)).unwrap();
        let fp: Vec<f64> = perm.iter().map(|&j| c.freq()[j]).collect();
        let cp = SampleCounts::from_freq(fp, c.n_samples()).unwrap();
        let g1 = grad_q_theta(&c, &x, &omega, 1).unwrap();
        let g2 = grad_q_theta(&cp, &xp, &omega, 1).unwrap();
        assert!((g1 - g2).amax() < 1e-14);
        assert!(grad_q_theta(&c, &x, &omega, 2).is_err());
    }

    #[test]
    fn zero_step_keeps_atoms() {
        let (x, omega, c) = instance();
        let cfg = EmConfig {
            step_size: 0.0,
            ..EmConfig::default()
        };
        let next = em_step(&c, &x, &omega, &cfg).unwrap();
        assert_eq!(next.thetas(), omega.thetas());
        let a = update_alpha(&c, &x, &omega).unwrap();
        assert_eq!(next.alpha().as_slice(), a.as_slice());
    }

    #[test]
    fn single_softmax_fixed_point() {
        let (x, _, _) = instance();
        let theta = [0.6, -0.9];
        let c = SampleCounts::population(softmax_component(&x, &theta).unwrap()).unwrap();
        let omega = MixtureParams::from_rows(vec![1.0], &[theta.to_vec()]).unwrap();
        let next = em_step(&c, &x, &omega, &EmConfig::default()).unwrap();
        assert!((next.thetas() - omega.thetas()).amax() < 1e-10);
    }

    #[test]
    fn population_fit_at_truth_converges_immediately() {
        let (x, omega, _) = instance();
        let c = population_counts(&x, &omega).unwrap();
        let r = em_fit(&c, &x, &omega, &EmConfig::default()).unwrap();
        assert!(r.converged);
        assert!(r.iters_used <= 2);
        assert_eq!(r.loglik_trace.len(), r.iters_used + 1);
        let next = em_step(&c, &x, &omega, &EmConfig::default()).unwrap();
        assert!((next.alpha() - omega.alpha()).amax() < 1e-12);
    }

    #[test]
    fn population_counts_single_component() {
        let (x, _, _) = instance();
        let omega = MixtureParams::from_rows(vec![1.0], &[vec![0.2, 0.1]]).unwrap();
        let c = population_counts(&x, &omega).unwrap();
        assert!(c.is_population());
        let a = softmax_component(&x, &[0.2, 0.1]).unwrap();
        for (u, v) in c.freq().iter().zip(&a) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let (x, omega, c) = instance();
        let start = MixtureParams::from_rows(vec![0.5, 0.5], &[vec![0.0, 0.1], vec![0.1, 0.0]]).unwrap();
        let a = em_fit(&c, &x, &start, &EmConfig::default()).unwrap();
        let b = em_fit(&c, &x, &start, &EmConfig::default()).unwrap();
        assert_eq!(a, b);
        let _ = omega;
    }

    #[test]
    fn alpha_floor_is_flagged() {
        let (x, _, c) = instance();
        let start = MixtureParams::from_rows(vec![1.0, 0.0], &[vec![0.0, 0.1], vec![0.1, 0.0]]).unwrap();
        let r = em_fit(&c, &x, &start, &EmConfig::default()).unwrap();
        assert!(r.alpha_floored);
        assert!(r.final_loglik.is_finite());
    }

    #[test]
    fn config_validation() {
        let bad = EmConfig {
            max_iters: 0,
            ..EmConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = EmConfig {
            rel_tol: 0.0,
            ..EmConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
