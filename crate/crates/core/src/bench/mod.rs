//! Simulation harness: scenario generation, the estimation methods, matched error
//! metrics and deterministic parallel replication.

pub mod metrics;
pub mod presets;

pub use metrics::{err_alpha, err_theta, hungarian, ThetaMatch, EXHAUSTIVE_MAX_K};

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::em::{em_fit, EmConfig};
use crate::error::{Error, Result};
use crate::model::{sample_with_rng, FeatureMatrix, MixtureParams, SampleCounts};
use crate::mom::{mom_fit, MomResult};
use crate::rng::Stream;
use crate::subspace::{estimate_subspace, random_inits, select_axis, InitMode, SubspaceEstimate};

/// Header of the results CSV.
pub const CSV_HEADER: &str = "scenario_id,K,L,p,N,seed,method,replicate,err_theta,err_alpha,iters,wall_ms,status";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Mom,
    EmMom,
    /// Best of `m` EM runs started in the estimated subspace.
    EmDrRand(usize),
    /// Best of `m` EM runs started from ambient Gaussian atoms.
    EmRand(usize),
    EmOracle,
}

impl Method {
    /// Parses a method name; `EM-dr-rand` and `EM-rand` without a count use `default_m`.
    pub fn parse(name: &str, default_m: usize) -> Result<Self> {
        let count = |rest: &str| -> Result<usize> {
            if rest.is_empty() {
                return Ok(default_m);
            }
            let m: usize = rest
                .strip_prefix('-')
                .and_then(|r| r.parse().ok())
                .ok_or_else(|| Error::invalid(format!("bad initialisation count in method `{name}`")))?;
            if m == 0 {
                return Err(Error::invalid(format!("method `{name}` needs at least one initialisation")));
            }
            Ok(m)
        };
        match name {
            "MoM" => Ok(Method::Mom),
            "EM-MoM" => Ok(Method::EmMom),
            "EM-oracle" => Ok(Method::EmOracle),
            _ => {
                if let Some(rest) = name.strip_prefix("EM-dr-rand") {
                    Ok(Method::EmDrRand(count(rest)?))
                } else if let Some(rest) = name.strip_prefix("EM-rand") {
                    Ok(Method::EmRand(count(rest)?))
                } else {
                    Err(Error::invalid(format!(
                        "unknown method `{name}` (expected MoM, EM-MoM, EM-dr-rand-<m>, EM-rand-<m> or EM-oracle)"
                    )))
                }
            }
        }
    }

    fn needs_mom(self) -> bool {
        matches!(self, Method::Mom | Method::EmMom)
    }

    fn needs_subspace(self) -> bool {
        matches!(self, Method::Mom | Method::EmMom | Method::EmDrRand(_))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Mom => f.write_str("MoM"),
            Method::EmMom => f.write_str("EM-MoM"),
            Method::EmDrRand(m) => write!(f, "EM-dr-rand-{m}"),
            Method::EmRand(m) => write!(f, "EM-rand-{m}"),
            Method::EmOracle => f.write_str("EM-oracle"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::parse(s, 10)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    MomFailure,
    Degenerate,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::MomFailure => "mom-failure",
            Status::Degenerate => "degenerate",
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub k: usize,
    pub l: usize,
    pub p: usize,
    pub n: u64,
    pub seed: u64,
    pub methods: Vec<Method>,
    /// Default initialisation count for random-start methods given without one.
    pub m_inits: usize,
    pub em: EmConfig,
    pub bound: f64,
    pub n_axis_candidates: usize,
    /// Measure wall-clock time per method; otherwise `wall_ms` is written as 0 so the
    /// output is byte-reproducible.
    pub record_wall_time: bool,
}

impl Scenario {
    pub fn new(id: impl Into<String>, k: usize, l: usize, p: usize, n: u64, seed: u64) -> Self {
        Scenario {
            id: id.into(),
            k,
            l,
            p,
            n,
            seed,
            methods: vec![
                Method::Mom,
                Method::EmMom,
                Method::EmDrRand(10),
                Method::EmOracle,
            ],
            m_inits: 10,
            em: EmConfig {
                track_trace: false,
                ..EmConfig::default()
            },
            bound: 1.0,
            n_axis_candidates: crate::subspace::DEFAULT_AXIS_CANDIDATES,
            record_wall_time: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.l == 0 {
            return Err(Error::invalid("K and L must be at least 1"));
        }
        if self.k > self.l {
            return Err(Error::invalid(format!(
                "K = {} exceeds L = {}: orthonormal atoms are unavailable",
                self.k, self.l
            )));
        }
        if self.p < 2 || self.n == 0 {
            return Err(Error::invalid("need p ≥ 2 support points and N ≥ 1 samples"));
        }
        if !(self.bound > 0.0) || !self.bound.is_finite() {
            return Err(Error::invalid("bound must be positive and finite"));
        }
        if self.n_axis_candidates == 0 {
            return Err(Error::invalid("n_axis_candidates must be at least 1"));
        }
        if self.id.contains([',', '\n', '"']) {
            return Err(Error::invalid("scenario id must not contain commas, quotes or newlines"));
        }
        self.em.validate()
    }

    fn replicate_stream(&self, replicate: u64) -> Stream {
        Stream::root(self.seed).label("replicate").index(replicate)
    }
}

/// One simulated data set.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioData {
    pub x: FeatureMatrix,
    pub omega_star: MixtureParams,
    pub counts: SampleCounts,
}

/// Features `N(0, I_L)`, orthonormal atoms from the left singular vectors of an `L × K`
/// Gaussian matrix, uniform weights, and `N` draws from the mixture. Every replicate
/// redraws all three from its own streams.
pub fn generate_scenario(sc: &Scenario, replicate: u64) -> Result<ScenarioData> {
    sc.validate()?;
    let stream = sc.replicate_stream(replicate);
    let mut rng = stream.label("x").rng();
    let x = FeatureMatrix::new(DMatrix::from_fn(sc.p, sc.l, |_, _| rng.sample(StandardNormal)))?;
    let mut rng = stream.label("theta").rng();
    let g = DMatrix::<f64>::from_fn(sc.l, sc.k, |_, _| rng.sample(StandardNormal));
    let u = g
        .svd(true, false)
        .u
        .ok_or_else(|| Error::NumericDegeneracy("SVD of the atom generator failed".into()))?;
    let omega_star = MixtureParams::new(vec![1.0 / sc.k as f64; sc.k], u.columns(0, sc.k).transpose())?;
    let mut rng = stream.label("y").rng();
    let counts = sample_with_rng(&x, &omega_star, sc.n, &mut rng)?;
    Ok(ScenarioData {
        x,
        omega_star,
        counts,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub scenario_id: String,
    pub k: usize,
    pub l: usize,
    pub p: usize,
    pub n: u64,
    pub seed: u64,
    pub method: String,
    pub replicate: u64,
    /// NaN when the method produced no estimate.
    pub err_theta: f64,
    pub err_alpha: f64,
    pub iters: usize,
    pub wall_ms: u64,
    pub status: Status,
}

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:?},{:?},{},{},{}",
            self.scenario_id,
            self.k,
            self.l,
            self.p,
            self.n,
            self.seed,
            self.method,
            self.replicate,
            self.err_theta,
            self.err_alpha,
            self.iters,
            self.wall_ms,
            self.status
        )
    }
}

pub fn write_csv<W: Write>(mut out: W, records: &[BenchRecord]) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Estimates shared by the MoM-based and subspace-based methods of one replicate.
pub struct SharedEstimates {
    pub subspace: Option<Result<SubspaceEstimate>>,
    pub mom: Option<Result<MomResult>>,
}

/// Subspace from `Γ̂` with `Σ = I`, axis by determinant selection, then the moment fit.
pub fn mom_pipeline(sc: &Scenario, data: &ScenarioData, subspace: &SubspaceEstimate, stream: Stream) -> Result<MomResult> {
    let axis = select_axis(
        &data.counts,
        &data.x,
        &subspace.v_hat,
        sc.k,
        sc.bound,
        sc.n_axis_candidates,
        stream.label("axis").seed(),
    )?;
    mom_fit(&data.counts, &data.x, sc.k, sc.bound, &axis)
}

fn shared_estimates(sc: &Scenario, data: &ScenarioData, stream: Stream) -> SharedEstimates {
    let subspace = sc
        .methods
        .iter()
        .any(|m| m.needs_subspace())
        .then(|| estimate_subspace(&data.counts, &data.x, &DMatrix::identity(sc.l, sc.l), sc.k));
    let mom = match &subspace {
        Some(Ok(s)) if sc.methods.iter().any(|m| m.needs_mom()) => Some(mom_pipeline(sc, data, s, stream)),
        Some(Err(e)) if sc.methods.iter().any(|m| m.needs_mom()) => Some(Err(Error::NumericDegeneracy(
            format!("subspace estimate failed: {e}"),
        ))),
        _ => None,
    };
    SharedEstimates { subspace, mom }
}

/// Estimate and iteration count, or the failure status.
type Outcome = (Option<MixtureParams>, usize, Status);

fn partial_of(err: &Error) -> Option<MixtureParams> {
    match err {
        Error::MomFailure {
            partial: Some(p), ..
        } => Some(p.omega_hat.clone()),
        _ => None,
    }
}

fn best_of_random(sc: &Scenario, data: &ScenarioData, inits: Vec<MixtureParams>) -> Outcome {
    let mut best: Option<(f64, MixtureParams, usize)> = None;
    for omega0 in &inits {
        if let Ok(fit) = em_fit(&data.counts, &data.x, omega0, &sc.em) {
            if best.as_ref().is_none_or(|(ll, _, _)| fit.final_loglik > *ll) {
                best = Some((fit.final_loglik, fit.omega_hat, fit.iters_used));
            }
        }
    }
    match best {
        Some((_, omega, iters)) => (Some(omega), iters, Status::Ok),
        None => (None, 0, Status::Degenerate),
    }
}

fn run_em(sc: &Scenario, data: &ScenarioData, omega0: &MixtureParams, status: Status) -> Outcome {
    match em_fit(&data.counts, &data.x, omega0, &sc.em) {
        Ok(fit) => (Some(fit.omega_hat), fit.iters_used, status),
        Err(_) => (None, 0, Status::Degenerate),
    }
}

fn outcome(sc: &Scenario, data: &ScenarioData, method: Method, shared: &SharedEstimates, stream: Stream) -> Outcome {
    match method {
        Method::Mom => match shared.mom.as_ref().expect("computed when requested") {
            Ok(res) => (Some(res.omega_hat.clone()), res.diagnostics.projection_iters, Status::Ok),
            Err(e) => (partial_of(e), 0, Status::MomFailure),
        },
        Method::EmMom => match shared.mom.as_ref().expect("computed when requested") {
            Ok(res) => run_em(sc, data, &res.omega_hat, Status::Ok),
            Err(e) => match partial_of(e) {
                Some(p) => {
                    let (omega, iters, _) = run_em(sc, data, &p, Status::MomFailure);
                    (omega, iters, Status::MomFailure)
                }
                None => (None, 0, Status::MomFailure),
            },
        },
        Method::EmDrRand(m) => match shared.subspace.as_ref().expect("computed when requested") {
            Ok(s) => match random_inits(&s.v_hat, sc.k, m, InitMode::Subspace, stream.seed()) {
                Ok(inits) => best_of_random(sc, data, inits),
                Err(_) => (None, 0, Status::Degenerate),
            },
            Err(_) => (None, 0, Status::Degenerate),
        },
        Method::EmRand(m) => {
            let dummy = DMatrix::identity(sc.l, 1);
            match random_inits(&dummy, sc.k, m, InitMode::Ambient, stream.seed()) {
                Ok(inits) => best_of_random(sc, data, inits),
                Err(_) => (None, 0, Status::Degenerate),
            }
        }
        Method::EmOracle => run_em(sc, data, &data.omega_star, Status::Ok),
    }
}

/// Runs one method on one replicate's data and scores it against the truth.
pub fn run_method(
    sc: &Scenario,
    data: &ScenarioData,
    method: Method,
    shared: &SharedEstimates,
    replicate: u64,
) -> BenchRecord {
    let stream = sc.replicate_stream(replicate).label("method").label(&method.to_string());
    let start = Instant::now();
    let (omega, iters, status) = outcome(sc, data, method, shared, stream);
    let elapsed = start.elapsed().as_millis() as u64;
    let (err_t, err_a) = omega
        .and_then(|o| {
            let m = err_theta(data.omega_star.thetas(), o.thetas()).ok()?;
            let a = err_alpha(data.omega_star.alpha(), o.alpha(), &m.perm).ok()?;
            Some((m.err, a))
        })
        .unwrap_or((f64::NAN, f64::NAN));
    BenchRecord {
        scenario_id: sc.id.clone(),
        k: sc.k,
        l: sc.l,
        p: sc.p,
        n: sc.n,
        seed: sc.seed,
        method: method.to_string(),
        replicate,
        err_theta: err_t,
        err_alpha: err_a,
        iters,
        wall_ms: if sc.record_wall_time { elapsed } else { 0 },
        status,
    }
}

/// All methods of a scenario on one replicate, in the scenario's method order.
pub fn run_replicate(sc: &Scenario, replicate: u64) -> Result<Vec<BenchRecord>> {
    if sc.methods.is_empty() {
        return Ok(Vec::new());
    }
    let data = generate_scenario(sc, replicate)?;
    let start = Instant::now();
    let shared = shared_estimates(sc, &data, sc.replicate_stream(replicate).label("shared"));
    let shared_ms = start.elapsed().as_millis() as u64;
    let mut records: Vec<BenchRecord> = sc
        .methods
        .iter()
        .map(|&m| run_method(sc, &data, m, &shared, replicate))
        .collect();
    if sc.record_wall_time {
        // the shared subspace and moment fit are charged to the methods that use them
        for (r, m) in records.iter_mut().zip(&sc.methods) {
            if m.needs_mom() {
                r.wall_ms += shared_ms;
            }
        }
    }
    Ok(records)
}

/// Every `(scenario, replicate, method)` cell, ordered by scenario position, replicate,
/// then method position. The output does not depend on `threads`.
pub fn run_benchmark(scenarios: &[Scenario], replicates: u64, threads: usize) -> Result<Vec<BenchRecord>> {
    if replicates == 0 {
        return Err(Error::invalid("replicates must be at least 1"));
    }
    for sc in scenarios {
        sc.validate()?;
    }
    let cells: Vec<(usize, u64)> = (0..scenarios.len())
        .flat_map(|s| (0..replicates).map(move |r| (s, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot build thread pool: {e}")))?;
    let blocks: Vec<Result<Vec<BenchRecord>>> =
        pool.install(|| cells.par_iter().map(|&(s, r)| run_replicate(&scenarios[s], r)).collect());
    let mut out = Vec::new();
    for b in blocks {
        out.extend(b?);
    }
    Ok(out)
}
