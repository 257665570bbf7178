//! Command-line front end: `simulate`, `fit`, `bench` and `eval`.
//!
//! Exit codes: 0 success, 1 invalid input or IO failure, 2 structured failure of the
//! moment estimator, 64 usage error.

pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use crate::bench::metrics::{err_alpha, err_theta};
use crate::bench::presets::{preset, PRESET_NAMES};
use crate::bench::{generate_scenario, run_benchmark, write_csv, Method};
use crate::em::{em_fit, EmConfig, EmResult};
use crate::error::{Error, Result};
use crate::io;
use crate::model::{log_likelihood, FeatureMatrix, MixtureParams, SampleCounts};
use crate::mom::{mom_fit, MomResult};
use crate::rng::Stream;
use crate::subspace::{
    estimate_subspace, random_inits, sample_covariance, select_axis, InitMode, SubspaceEstimate,
    DEFAULT_AXIS_CANDIDATES,
};
use config::{missing, Covariance, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_METHOD_FAILURE: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

/// Environment variable consulted when `--threads` is absent.
pub const THREADS_ENV: &str = "SOFTMIX_THREADS";

#[derive(Debug, Parser)]
#[command(name = "softmix", version, about = "Softmax mixture estimation and benchmarking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw features, atoms and counts for the configured scenario.
    Simulate(SimulateArgs),
    /// Fit a mixture to features and counts with one estimation method.
    Fit(FitArgs),
    /// Run a benchmark grid and write results.csv.
    Bench(BenchArgs),
    /// Print the matched errors between two parameter files.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides [scenario] seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides [paths] out.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// MoM, EM-MoM, EM-dr-rand-<m>, EM-rand-<m> or EM-oracle.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub counts: Option<PathBuf>,
    /// Starting parameters for EM-oracle.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// True parameters; when given, the matched errors are printed.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Named scenario grid; replaces [scenario].
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub replicates: Option<u64>,
    /// Worker threads; overrides SOFTMIX_THREADS.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Record wall-clock time per method (output is then not byte-reproducible).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub truth: PathBuf,
    pub estimate: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Eval(a) => cmd_eval(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_method_failure() {
                EXIT_METHOD_FAILURE
            } else {
                EXIT_INVALID
            }
        }
    }
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.scenario.seed = Some(seed);
    }
    if let Some(out) = &common.out {
        cfg.paths.out = Some(out.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.out.clone().unwrap_or_else(|| PathBuf::from("."))
}

/// Flag, then `SOFTMIX_THREADS`, then the number of logical cores.
pub fn resolve_threads(flag: Option<usize>) -> Result<usize> {
    if let Some(t) = flag {
        return if t == 0 {
            Err(Error::InvalidInput("--threads must be at least 1".into()))
        } else {
            Ok(t)
        };
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(t) if t > 0 => Ok(t),
            _ => Err(Error::InvalidInput(format!("{THREADS_ENV}=`{v}` is not a positive integer"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<i32> {
    let cfg = load_config(&args.common)?;
    let sc = cfg.scenario()?;
    let data = generate_scenario(&sc, 0)?;
    let dir = out_dir(&cfg);
    io::write_features(&io::output_path(&dir, "features.csv")?, &data.x)?;
    io::write_params(&io::output_path(&dir, "truth.params")?, &data.omega_star)?;
    io::write_counts(&io::output_path(&dir, "counts.csv")?, &data.counts)?;
    Ok(EXIT_OK)
}

/// Result of one fit: the estimate (possibly partial), its trace, diagnostics and the
/// method failure, if any.
struct FitOutcome {
    omega: Option<MixtureParams>,
    trace: Vec<f64>,
    diag: Vec<(String, String)>,
    failure: Option<Error>,
}

fn em_diag(diag: &mut Vec<(String, String)>, fit: &EmResult) {
    diag.push(("iters".into(), fit.iters_used.to_string()));
    diag.push(("converged".into(), fit.converged.to_string()));
    diag.push(("final_loglik".into(), io::fmt_f64(fit.final_loglik)));
    diag.push(("alpha_floored".into(), fit.alpha_floored.to_string()));
}

fn mom_diag(diag: &mut Vec<(String, String)>, res: &MomResult) {
    diag.push(("projection_iters".into(), res.diagnostics.projection_iters.to_string()));
    diag.push(("min_hankel_eig".into(), io::fmt_f64(res.diagnostics.min_hankel_eig)));
    diag.push(("vandermonde_cond".into(), io::fmt_f64(res.diagnostics.vandermonde_cond)));
    let roots: Vec<String> = res.roots.iter().map(|&r| io::fmt_f64(r)).collect();
    diag.push(("roots".into(), roots.join(" ")));
}

struct FitInputs<'a> {
    cfg: &'a RunConfig,
    x: &'a FeatureMatrix,
    counts: &'a SampleCounts,
    k: usize,
    em: EmConfig,
    stream: Stream,
}

impl FitInputs<'_> {
    fn subspace(&self) -> Result<SubspaceEstimate> {
        let l = self.x.dim();
        let sigma = match self.cfg.covariance() {
            Covariance::Identity => DMatrix::identity(l, l),
            Covariance::Sample => sample_covariance(self.x),
            Covariance::File(path) => io::read_matrix(&path)?,
        };
        estimate_subspace(self.counts, self.x, &sigma, self.k)
    }

    fn mom(&self, subspace: &SubspaceEstimate) -> Result<MomResult> {
        let bound = self.cfg.mom.bound.ok_or_else(|| missing("mom", "bound"))?;
        let n_candidates = self.cfg.mom.n_axis_candidates.unwrap_or(DEFAULT_AXIS_CANDIDATES);
        let axis = select_axis(
            self.counts,
            self.x,
            &subspace.v_hat,
            self.k,
            bound,
            n_candidates,
            self.stream.label("axis").seed(),
        )?;
        mom_fit(self.counts, self.x, self.k, bound, &axis)
    }

    fn em(&self, omega0: &MixtureParams) -> Result<EmResult> {
        em_fit(self.counts, self.x, omega0, &self.em)
    }

    fn best_of(&self, inits: &[MixtureParams]) -> Result<EmResult> {
        let mut best: Option<EmResult> = None;
        let mut last_err = None;
        for omega0 in inits {
            match self.em(omega0) {
                Ok(fit) if best.as_ref().is_none_or(|b| fit.final_loglik > b.final_loglik) => best = Some(fit),
                Ok(_) => {}
                Err(e) => last_err = Some(e),
            }
        }
        best.ok_or_else(|| last_err.unwrap_or_else(|| Error::InvalidInput("no initialisations".into())))
    }
}

fn fit_method(inputs: &FitInputs<'_>, method: Method, init: Option<&MixtureParams>) -> Result<FitOutcome> {
    let mut out = FitOutcome {
        omega: None,
        trace: Vec::new(),
        diag: vec![("method".into(), method.to_string())],
        failure: None,
    };
    match method {
        Method::Mom | Method::EmMom => {
            let subspace = inputs.subspace()?;
            let start = match inputs.mom(&subspace) {
                Ok(res) => {
                    mom_diag(&mut out.diag, &res);
                    Some(res.omega_hat)
                }
                Err(e) if e.is_method_failure() => {
                    let partial = match &e {
                        Error::MomFailure { partial: Some(p), .. } => {
                            mom_diag(&mut out.diag, p);
                            Some(p.omega_hat.clone())
                        }
                        _ => None,
                    };
                    out.failure = Some(e);
                    partial
                }
                Err(e) => return Err(e),
            };
            if method == Method::Mom {
                out.omega = start;
            } else if let Some(omega0) = start {
                let fit = inputs.em(&omega0)?;
                em_diag(&mut out.diag, &fit);
                out.trace.clone_from(&fit.loglik_trace);
                out.omega = Some(fit.omega_hat);
            }
        }
        Method::EmDrRand(m) | Method::EmRand(m) => {
            let (v_hat, mode) = if let Method::EmDrRand(_) = method {
                (inputs.subspace()?.v_hat, InitMode::Subspace)
            } else {
                (DMatrix::identity(inputs.x.dim(), 1), InitMode::Ambient)
            };
            let inits = random_inits(&v_hat, inputs.k, m, mode, inputs.stream.label("inits").seed())?;
            let fit = inputs.best_of(&inits)?;
            em_diag(&mut out.diag, &fit);
            out.trace.clone_from(&fit.loglik_trace);
            out.omega = Some(fit.omega_hat);
        }
        Method::EmOracle => {
            let omega0 = init.ok_or_else(|| missing("paths", "init"))?;
            let fit = inputs.em(omega0)?;
            em_diag(&mut out.diag, &fit);
            out.trace.clone_from(&fit.loglik_trace);
            out.omega = Some(fit.omega_hat);
        }
    }
    Ok(out)
}

fn required_path(flag: &Option<PathBuf>, from_cfg: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| from_cfg.clone())
        .ok_or_else(|| missing("paths", key))
}

pub fn cmd_fit(args: &FitArgs) -> Result<i32> {
    let cfg = load_config(&args.common)?;
    let x = io::read_features(&required_path(&args.features, &cfg.paths.features, "features")?)?;
    let counts = io::read_counts(&required_path(&args.counts, &cfg.paths.counts, "counts")?)?;
    let init = match args.init.clone().or_else(|| cfg.paths.init.clone()) {
        Some(p) => Some(io::read_params(&p)?),
        None => None,
    };
    let truth_path = args.truth.clone().or_else(|| cfg.paths.truth.clone());
    let method_name = match (&args.method, &cfg.scenario.methods) {
        (Some(m), _) => m.clone(),
        (None, Some(ms)) if ms.len() == 1 => ms[0].clone(),
        _ => return Err(Error::InvalidInput("give exactly one method via --method".into())),
    };
    let method = Method::parse(&method_name, cfg.m_inits())?;
    let k = cfg
        .scenario
        .k
        .or(init.as_ref().map(MixtureParams::n_components))
        .ok_or_else(|| missing("scenario", "k"))?;
    if k == 0 || k > x.dim() {
        return Err(Error::InvalidInput(format!("K = {k} must lie in 1..={}", x.dim())));
    }
    let inputs = FitInputs {
        cfg: &cfg,
        x: &x,
        counts: &counts,
        k,
        em: cfg.em_config(),
        stream: Stream::root(cfg.scenario.seed.unwrap_or(0)).label("fit").label(&method.to_string()),
    };
    let mut outcome = fit_method(&inputs, method, init.as_ref())?;

    let status = if outcome.failure.is_some() { "mom-failure" } else { "ok" };
    outcome.diag.insert(1, ("status".into(), status.into()));
    outcome.diag.push(("K".into(), k.to_string()));
    outcome.diag.push(("L".into(), x.dim().to_string()));
    if let Some(omega) = &outcome.omega {
        let ll = log_likelihood(&counts, &x, omega)?;
        outcome.diag.push(("loglik".into(), io::fmt_f64(ll)));
    }
    if let Some(e) = &outcome.failure {
        outcome.diag.push(("error".into(), e.to_string()));
    }

    let dir = out_dir(&cfg);
    if let Some(omega) = &outcome.omega {
        io::write_params(&io::output_path(&dir, "est.params")?, omega)?;
    }
    io::write_trace(&io::output_path(&dir, "trace.csv")?, &outcome.trace)?;
    io::write_diagnostics(&io::output_path(&dir, "diag.csv")?, &outcome.diag)?;

    if let (Some(truth), Some(omega)) = (truth_path, &outcome.omega) {
        let truth = io::read_params(&truth)?;
        println!("{}", error_line(&truth, omega)?);
    }
    match outcome.failure {
        Some(e) => {
            eprintln!("error: {e}");
            Ok(EXIT_METHOD_FAILURE)
        }
        None => Ok(EXIT_OK),
    }
}

pub fn cmd_bench(args: &BenchArgs) -> Result<i32> {
    let cfg = load_config(&args.common)?;
    let preset_name = args.preset.clone().or_else(|| cfg.bench.preset.clone());
    let timing = args.timing || cfg.bench.timing.unwrap_or(false);
    let (mut scenarios, default_reps) = match preset_name {
        Some(name) => {
            let p = preset(&name).ok_or_else(|| {
                Error::InvalidInput(format!("unknown preset `{name}` (available: {})", PRESET_NAMES.join(", ")))
            })?;
            (p.scenarios, p.replicates)
        }
        None => (vec![cfg.scenario()?], 1),
    };
    for sc in &mut scenarios {
        sc.record_wall_time = timing;
        if let Some(seed) = args.common.seed {
            sc.seed = seed;
        }
    }
    let replicates = args.replicates.or(cfg.bench.replicates).unwrap_or(default_reps);
    let threads = resolve_threads(args.threads)?;
    let records = run_benchmark(&scenarios, replicates, threads)?;
    let path = io::output_path(&out_dir(&cfg), "results.csv")?;
    let mut bytes = Vec::new();
    write_csv(&mut bytes, &records).map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })?;
    io::write_bytes(&path, &bytes)?;
    eprintln!("wrote {} records to {}", records.len(), path.display());
    Ok(EXIT_OK)
}

fn error_line(truth: &MixtureParams, est: &MixtureParams) -> Result<String> {
    let m = err_theta(truth.thetas(), est.thetas())?;
    let a = err_alpha(truth.alpha(), est.alpha(), &m.perm)?;
    Ok(format!("err_theta={} err_alpha={}", io::fmt_f64(m.err), io::fmt_f64(a)))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<i32> {
    let truth = io::read_params(&args.truth)?;
    let est = io::read_params(&args.estimate)?;
    println!("{}", error_line(&truth, &est)?);
    Ok(EXIT_OK)
}
