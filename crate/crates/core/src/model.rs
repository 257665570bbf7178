//! Softmax mixture model: features, parameters, empirical frequencies and the
//! log-space evaluation every estimator builds on.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, neumaier_sum};
use crate::rng::Stream;

/// Tolerance on `Σ α_k = 1` and `Σ freq_j = 1`.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// The `p × L` support of the mixture; row `j` is the feature vector `x_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    x: DMatrix<f64>,
}

impl FeatureMatrix {
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        if x.nrows() < 2 {
            return Err(Error::invalid(format!(
                "feature matrix needs at least 2 rows, got {}",
                x.nrows()
            )));
        }
        if x.ncols() < 1 {
            return Err(Error::invalid("feature matrix needs at least 1 column"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature matrix has non-finite entries"));
        }
        Ok(FeatureMatrix { x })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.len();
        let l = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != l) {
            return Err(Error::invalid("feature rows have unequal lengths"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(DMatrix::from_row_slice(p, l, &flat))
    }

    /// Number of support points `p`.
    pub fn n_points(&self) -> usize {
        self.x.nrows()
    }

    /// Feature dimension `L`.
    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn row(&self, j: usize) -> Vec<f64> {
        self.x.row(j).iter().copied().collect()
    }

    /// Projections `x_j^T v` for every row.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.x * v
    }
}

/// Mixing weights `α ∈ Δ^K` and atoms `θ_1..θ_K` stored as the rows of a `K × L` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    alpha: DVector<f64>,
    thetas: DMatrix<f64>,
}

impl MixtureParams {
    pub fn new(alpha: Vec<f64>, thetas: DMatrix<f64>) -> Result<Self> {
        let k = alpha.len();
        if k == 0 {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        if thetas.nrows() != k {
            return Err(Error::invalid(format!(
                "{} weights but {} atoms",
                k,
                thetas.nrows()
            )));
        }
        if thetas.ncols() == 0 {
            return Err(Error::invalid("atoms must have dimension at least 1"));
        }
        if thetas.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("atoms have non-finite entries"));
        }
        check_simplex(&alpha, "mixing weights")?;
        Ok(MixtureParams {
            alpha: DVector::from_vec(alpha),
            thetas,
        })
    }

    pub fn from_rows(alpha: Vec<f64>, rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.len();
        let l = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != l) {
            return Err(Error::invalid("atom rows have unequal lengths"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(alpha, DMatrix::from_row_slice(k, l, &flat))
    }

    pub fn n_components(&self) -> usize {
        self.alpha.len()
    }

    pub fn dim(&self) -> usize {
        self.thetas.ncols()
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn thetas(&self) -> &DMatrix<f64> {
        &self.thetas
    }

    pub fn theta(&self, k: usize) -> DVector<f64> {
        self.thetas.row(k).transpose()
    }

    /// Reorders components: component `i` of the result is component `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let alpha = DVector::from_iterator(perm.len(), perm.iter().map(|&i| self.alpha[i]));
        let thetas = self.thetas.select_rows(perm);
        MixtureParams { alpha, thetas }
    }

    fn check_against(&self, x: &FeatureMatrix) -> Result<()> {
        if self.dim() != x.dim() {
            return Err(Error::invalid(format!(
                "atoms have dimension {} but features have dimension {}",
                self.dim(),
                x.dim()
            )));
        }
        Ok(())
    }
}

fn check_simplex(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(Error::invalid(format!("{what} must be finite and nonnegative")));
    }
    let s = neumaier_sum(v.iter().copied());
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid(format!("{what} sum to {s}, not 1")));
    }
    Ok(())
}

/// Empirical frequencies `π̂` over the support points, with the sample size `N`.
///
/// `n_samples == 0` marks population-limit frequencies (no sampling noise).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCounts {
    freq: Vec<f64>,
    n_samples: u64,
}

impl SampleCounts {
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let n: u64 = counts.iter().sum();
        if n == 0 {
            return Err(Error::invalid("counts are all zero"));
        }
        let freq = counts.iter().map(|&c| c as f64 / n as f64).collect();
        Ok(SampleCounts { freq, n_samples: n })
    }

    /// Frequencies with an explicit sample size; `n_samples = 0` denotes population data.
    pub fn from_freq(freq: Vec<f64>, n_samples: u64) -> Result<Self> {
        if freq.len() < 2 {
            return Err(Error::invalid("frequencies need at least 2 support points"));
        }
        check_simplex(&freq, "frequencies")?;
        Ok(SampleCounts { freq, n_samples })
    }

    pub fn population(freq: Vec<f64>) -> Result<Self> {
        Self::from_freq(freq, 0)
    }

    pub fn freq(&self) -> &[f64] {
        &self.freq
    }

    pub fn n_samples(&self) -> u64 {
        self.n_samples
    }

    pub fn is_population(&self) -> bool {
        self.n_samples == 0
    }

    pub fn n_points(&self) -> usize {
        self.freq.len()
    }

    /// Integer counts `N·π̂_j`, or `None` for population data.
    pub fn counts(&self) -> Option<Vec<u64>> {
        if self.is_population() {
            return None;
        }
        let n = self.n_samples as f64;
        Some(self.freq.iter().map(|f| (f * n).round() as u64).collect())
    }

    pub(crate) fn check_against(&self, x: &FeatureMatrix) -> Result<()> {
        if self.freq.len() != x.n_points() {
            return Err(Error::invalid(format!(
                "{} frequencies but {} support points",
                self.freq.len(),
                x.n_points()
            )));
        }
        Ok(())
    }
}

/// `log A(x_j; θ_k)` for all `j, k`, as a `p × K` matrix.
pub(crate) fn log_components(x: &FeatureMatrix, thetas: &DMatrix<f64>) -> DMatrix<f64> {
    let p = x.n_points();
    let mut z = x.matrix() * thetas.transpose();
    for col in z.as_mut_slice().chunks_mut(p) {
        let lse = log_sum_exp(col);
        col.iter_mut().for_each(|v| *v -= lse);
    }
    z
}

/// Log-space evaluation of a mixture on its support.
pub(crate) struct Evaluation {
    /// `log A(x_j; θ_k)`, `p × K`.
    pub log_a: DMatrix<f64>,
    /// `log π(x_j; ω)`, length `p`.
    pub log_pi: Vec<f64>,
    pub log_alpha: Vec<f64>,
}

impl Evaluation {
    pub fn new(x: &FeatureMatrix, omega: &MixtureParams) -> Result<Self> {
        omega.check_against(x)?;
        let log_a = log_components(x, omega.thetas());
        let log_alpha: Vec<f64> = omega.alpha().iter().map(|a| a.ln()).collect();
        let p = x.n_points();
        let k = omega.n_components();
        let mut buf = vec![0.0; k];
        let mut log_pi = Vec::with_capacity(p);
        for j in 0..p {
            for c in 0..k {
                buf[c] = log_alpha[c] + log_a[(j, c)];
            }
            log_pi.push(log_sum_exp(&buf));
        }
        Ok(Evaluation {
            log_a,
            log_pi,
            log_alpha,
        })
    }

    /// Posterior component probabilities, `p × K` (row `j` sums to one).
    pub fn responsibilities(&self) -> Result<DMatrix<f64>> {
        let (p, k) = self.log_a.shape();
        let mut g = DMatrix::zeros(p, k);
        for j in 0..p {
            let lp = self.log_pi[j];
            if !lp.is_finite() {
                return Err(Error::NumericDegeneracy(format!(
                    "every component underflows at support point {j}"
                )));
            }
            for c in 0..k {
                g[(j, c)] = (self.log_alpha[c] + self.log_a[(j, c)] - lp).exp();
            }
        }
        Ok(g)
    }

    pub fn log_likelihood(&self, counts: &SampleCounts) -> Result<f64> {
        log_likelihood_from_log_pmf(counts.freq(), &self.log_pi)
    }
}

pub(crate) fn log_likelihood_from_log_pmf(freq: &[f64], log_pi: &[f64]) -> Result<f64> {
    let mut terms = Vec::with_capacity(freq.len());
    for (j, (&f, &lp)) in freq.iter().zip(log_pi).enumerate() {
        if f > 0.0 {
            if !lp.is_finite() {
                return Err(Error::NumericDegeneracy(format!(
                    "observed support point {j} has zero mixture probability"
                )));
            }
            terms.push(f * lp);
        }
    }
    Ok(neumaier_sum(terms))
}

/// `A(θ) = softmax(Xθ)` computed with max-subtraction.
pub fn softmax_component(x: &FeatureMatrix, theta: &[f64]) -> Result<Vec<f64>> {
    if theta.len() != x.dim() {
        return Err(Error::invalid(format!(
            "theta has length {} but features have dimension {}",
            theta.len(),
            x.dim()
        )));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("theta has non-finite entries"));
    }
    let z = x.project(&DVector::from_column_slice(theta));
    let lse = log_sum_exp(z.as_slice());
    Ok(z.iter().map(|v| (v - lse).exp()).collect())
}

/// Mixture probabilities `π(x_j; ω) = Σ_k α_k A(x_j; θ_k)`.
pub fn mixture_pmf(x: &FeatureMatrix, omega: &MixtureParams) -> Result<Vec<f64>> {
    let ev = Evaluation::new(x, omega)?;
    Ok(ev.log_pi.iter().map(|v| v.exp()).collect())
}

/// Draws `n` i.i.d. support indices from the mixture and returns their frequencies.
pub fn sample(x: &FeatureMatrix, omega: &MixtureParams, n: u64, seed: u64) -> Result<SampleCounts> {
    let mut rng = Stream::root(seed).label("sample").rng();
    sample_with_rng(x, omega, n, &mut rng)
}

pub fn sample_with_rng<R: Rng + ?Sized>(
    x: &FeatureMatrix,
    omega: &MixtureParams,
    n: u64,
    rng: &mut R,
) -> Result<SampleCounts> {
    if n == 0 {
        return Err(Error::invalid("sample size must be at least 1"));
    }
    let pmf = mixture_pmf(x, omega)?;
    let dist = WeightedIndex::new(&pmf)
        .map_err(|e| Error::NumericDegeneracy(format!("cannot sample from mixture: {e}")))?;
    let mut counts = vec![0u64; pmf.len()];
    for _ in 0..n {
        counts[dist.sample(rng)] += 1;
    }
    SampleCounts::from_counts(&counts)
}

/// Sample log-likelihood `ℓ_N(ω) = Σ_j π̂_j log π(x_j; ω)`.
pub fn log_likelihood(counts: &SampleCounts, x: &FeatureMatrix, omega: &MixtureParams) -> Result<f64> {
    counts.check_against(x)?;
    Evaluation::new(x, omega)?.log_likelihood(counts)
}

/// Posterior probabilities `g(θ_k | x_j; ω)` as a `K × p` matrix; columns sum to one.
pub fn responsibilities(x: &FeatureMatrix, omega: &MixtureParams) -> Result<DMatrix<f64>> {
    Ok(Evaluation::new(x, omega)?.responsibilities()?.transpose())
}

/// `max(scale_theta · max_k ‖θ_k − θ_k^ref‖₂, ‖α − α^ref‖_∞ / scale_alpha)`, without
/// relabeling.
pub fn param_distance(
    omega: &MixtureParams,
    omega_ref: &MixtureParams,
    scale_theta: f64,
    scale_alpha: f64,
) -> Result<f64> {
    if !(scale_theta > 0.0) || !(scale_alpha > 0.0) {
        return Err(Error::invalid("distance scales must be positive"));
    }
    if omega.n_components() != omega_ref.n_components() || omega.dim() != omega_ref.dim() {
        return Err(Error::invalid("parameter shapes differ"));
    }
    let theta_part = (0..omega.n_components())
        .map(|k| (omega.thetas().row(k) - omega_ref.thetas().row(k)).norm())
        .fold(0.0, f64::max);
    let alpha_part = (omega.alpha() - omega_ref.alpha()).amax();
    Ok((scale_theta * theta_part).max(alpha_part / scale_alpha))
}

/// [`param_distance`] with the default scales `(1, min_k α_k^ref)`.
pub fn param_distance_default(omega: &MixtureParams, omega_ref: &MixtureParams) -> Result<f64> {
    let amin = omega_ref.alpha().min();
    param_distance(omega, omega_ref, 1.0, if amin > 0.0 { amin } else { 1.0 })
}
