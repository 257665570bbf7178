//! Second-moment subspace estimation and subspace-restricted directions and initialisations.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hermite::estimate_axis_moments;
use crate::linalg::{check_spd, spd_solve};
use crate::model::{FeatureMatrix, MixtureParams, SampleCounts};
use crate::mom::project_to_valid_moments;
use crate::rng::Stream;

/// Default number of candidate directions in [`select_axis`].
pub const DEFAULT_AXIS_CANDIDATES: usize = 200;
/// Retry budget in [`projected_direction`] when the projected draw vanishes.
pub const DIRECTION_RETRIES: u64 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceEstimate {
    pub gamma_hat: DMatrix<f64>,
    /// `L × K`, orthonormal columns.
    pub v_hat: DMatrix<f64>,
    /// Descending.
    pub eigvals: Vec<f64>,
}

/// How random EM initialisations draw their atoms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Uniform unit vectors in the span of `V̂` ("dr").
    Subspace,
    /// Ambient entries i.i.d. `N(0, 1/√L)` ("rand").
    Ambient,
}

impl InitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InitMode::Subspace => "dr",
            InitMode::Ambient => "rand",
        }
    }
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dr" => Ok(InitMode::Subspace),
            "rand" => Ok(InitMode::Ambient),
            other => Err(Error::invalid(format!("unknown init mode `{other}` (expected dr or rand)"))),
        }
    }
}

/// `Σ⁻¹`-whitened second moment of the observed feature rows minus `Σ⁻¹`, symmetrised.
pub fn estimate_gamma(counts: &SampleCounts, x: &FeatureMatrix, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    counts.check_against(x)?;
    let l = x.dim();
    if sigma.nrows() != l {
        return Err(Error::invalid(format!(
            "covariance is {}x{}, expected {l}x{l}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    check_spd(sigma)?;
    let sigma = (sigma + sigma.transpose()) * 0.5;
    // rows of z are Σ⁻¹x_j scaled by √π̂_j
    let mut z = spd_solve(&sigma, &x.matrix().transpose())?.transpose();
    for (j, &f) in counts.freq().iter().enumerate() {
        z.row_mut(j).scale_mut(f.sqrt());
    }
    let sigma_inv = spd_solve(&sigma, &DMatrix::identity(l, l))?;
    let a = z.transpose() * z - sigma_inv;
    Ok((&a + a.transpose()) * 0.5)
}

/// `p⁻¹ XᵀX`, the covariance estimate for centred features.
pub fn sample_covariance(x: &FeatureMatrix) -> DMatrix<f64> {
    let m = x.matrix();
    let c = m.transpose() * m / m.nrows() as f64;
    (&c + c.transpose()) * 0.5
}

/// Top-`K` eigenpairs by algebraic eigenvalue, each eigenvector signed so that its
/// largest-magnitude entry is positive.
pub fn top_eigenspace(gamma_hat: &DMatrix<f64>, k: usize) -> Result<SubspaceEstimate> {
    let l = gamma_hat.nrows();
    if !gamma_hat.is_square() {
        return Err(Error::invalid("Γ̂ must be square"));
    }
    if k == 0 || k > l {
        return Err(Error::invalid(format!("K = {k} must lie in 1..={l}")));
    }
    if gamma_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericDegeneracy("Γ̂ has non-finite entries".into()));
    }
    let sym = (gamma_hat + gamma_hat.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 0)
        .ok_or_else(|| Error::Eigen("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut v_hat = DMatrix::zeros(l, k);
    let mut eigvals = Vec::with_capacity(k);
    for (c, &i) in order.iter().take(k).enumerate() {
        let mut col = eig.eigenvectors.column(i).into_owned();
        let lead = col.iamax();
        if col[lead] < 0.0 {
            col.neg_mut();
        }
        v_hat.set_column(c, &col);
        eigvals.push(eig.eigenvalues[i]);
    }
    Ok(SubspaceEstimate {
        gamma_hat: gamma_hat.clone(),
        v_hat,
        eigvals,
    })
}

/// [`estimate_gamma`] followed by [`top_eigenspace`].
pub fn estimate_subspace(
    counts: &SampleCounts,
    x: &FeatureMatrix,
    sigma: &DMatrix<f64>,
    k: usize,
) -> Result<SubspaceEstimate> {
    top_eigenspace(&estimate_gamma(counts, x, sigma)?, k)
}

/// Principal angles (radians, ascending) between `span(a)` and `span(b)`, both with
/// orthonormal columns. Computed as `asin` of the singular values of `(I − aaᵀ) b`,
/// which stays accurate for small angles.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let residual = b - a * (a.transpose() * b);
    let mut angles: Vec<f64> = residual
        .singular_values()
        .iter()
        .map(|s| s.clamp(0.0, 1.0).asin())
        .collect();
    angles.sort_by(f64::total_cmp);
    angles
}

fn check_orthonormal(v_hat: &DMatrix<f64>) -> Result<()> {
    let k = v_hat.ncols();
    if k == 0 || k > v_hat.nrows() {
        return Err(Error::invalid("V̂ must have between 1 and L columns"));
    }
    let gap = (v_hat.transpose() * v_hat - DMatrix::<f64>::identity(k, k)).amax();
    if !(gap <= 1e-8) {
        return Err(Error::invalid(format!("V̂ columns are not orthonormal (gap {gap:e})")));
    }
    Ok(())
}

fn direction_from(v_hat: &DMatrix<f64>, stream: Stream) -> Result<DVector<f64>> {
    let l = v_hat.nrows();
    for attempt in 0..=DIRECTION_RETRIES {
        let mut rng = stream.index(attempt).rng();
        let u = DVector::from_fn(l, |_, _| rng.sample::<f64, _>(StandardNormal));
        let v = v_hat * (v_hat.transpose() * u);
        let n = v.norm();
        if n >= 1e-12 {
            return Ok(v / n);
        }
    }
    Err(Error::NumericDegeneracy(
        "projected direction vanished on every retry".into(),
    ))
}

/// Gaussian draw projected onto `span(V̂)` and normalised.
pub fn projected_direction(v_hat: &DMatrix<f64>, seed: u64) -> Result<DVector<f64>> {
    check_orthonormal(v_hat)?;
    direction_from(v_hat, Stream::root(seed).label("direction"))
}

/// `det M̃(v)` for the projected axis moments along `v`, where `M̃` is the `K × K` Hankel
/// matrix of `m̃_0..m̃_{2K−2}`.
pub fn axis_score(counts: &SampleCounts, x: &FeatureMatrix, v: &DVector<f64>, k: usize, bound: f64) -> Result<f64> {
    let m = estimate_axis_moments(counts, x, v, k)?;
    let projected = project_to_valid_moments(&m, bound)?;
    Ok(DMatrix::from_fn(k, k, |i, j| projected[i + j]).determinant())
}

/// Index of the candidate with the largest [`axis_score`]; ties go to the lowest index.
/// Candidates whose projection fails are skipped.
pub fn select_axis_among(
    counts: &SampleCounts,
    x: &FeatureMatrix,
    candidates: &[DVector<f64>],
    k: usize,
    bound: f64,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::invalid("at least one axis candidate is required"));
    }
    let scores: Vec<Result<f64>> = candidates
        .par_iter()
        .map(|v| axis_score(counts, x, v, k, bound))
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.into_iter().enumerate() {
        match s {
            Ok(d) if !d.is_nan() => {
                if best.is_none_or(|(_, b)| d > b) {
                    best = Some((i, d));
                }
            }
            Ok(_) => {}
            Err(e) if e.is_method_failure() => {}
            Err(e) => return Err(e),
        }
    }
    best.map(|(i, _)| i).ok_or(Error::AxisSelection)
}

/// Draws `n_candidates` projected directions and keeps the one with the largest
/// determinant of the denoised Hankel matrix.
pub fn select_axis(
    counts: &SampleCounts,
    x: &FeatureMatrix,
    v_hat: &DMatrix<f64>,
    k: usize,
    bound: f64,
    n_candidates: usize,
    seed: u64,
) -> Result<DVector<f64>> {
    check_orthonormal(v_hat)?;
    if n_candidates == 0 {
        return Err(Error::invalid("n_candidates must be at least 1"));
    }
    if v_hat.nrows() != x.dim() {
        return Err(Error::invalid("V̂ dimension differs from feature dimension"));
    }
    let stream = Stream::root(seed).label("axis-candidates");
    let candidates = (0..n_candidates as u64)
        .map(|i| direction_from(v_hat, stream.index(i)))
        .collect::<Result<Vec<_>>>()?;
    let best = select_axis_among(counts, x, &candidates, k, bound)?;
    Ok(candidates[best].clone())
}

/// `m` random EM starting points with uniform weights.
pub fn random_inits(
    v_hat: &DMatrix<f64>,
    k: usize,
    m: usize,
    mode: InitMode,
    seed: u64,
) -> Result<Vec<MixtureParams>> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if mode == InitMode::Subspace {
        check_orthonormal(v_hat)?;
    }
    let l = v_hat.nrows();
    let stream = Stream::root(seed).label("random-inits").label(mode.as_str());
    let ambient = Normal::new(0.0, (l as f64).powf(-0.25)).expect("positive standard deviation");
    (0..m as u64)
        .map(|i| {
            let mut thetas = DMatrix::zeros(k, l);
            match mode {
                InitMode::Subspace => {
                    for c in 0..k {
                        let theta = direction_from(v_hat, stream.index(i).index(c as u64))?;
                        thetas.set_row(c, &theta.transpose());
                    }
                }
                InitMode::Ambient => {
                    let mut rng = stream.index(i).rng();
                    for c in 0..k {
                        for d in 0..l {
                            thetas[(c, d)] = ambient.sample(&mut rng);
                        }
                    }
                }
            }
            MixtureParams::new(vec![1.0 / k as f64; k], thetas)
        })
        .collect()
}
