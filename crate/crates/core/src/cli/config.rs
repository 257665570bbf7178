//! TOML run configuration. Every section and key is optional; unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::bench::{Method, Scenario};
use crate::em::EmConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub em: EmSection,
    #[serde(default)]
    pub mom: MomSection,
    #[serde(default)]
    pub subspace: SubspaceSection,
    #[serde(default)]
    pub bench: BenchSection,
    #[serde(default)]
    pub paths: PathsSection,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub id: Option<String>,
    pub k: Option<usize>,
    pub l: Option<usize>,
    pub p: Option<usize>,
    pub n: Option<u64>,
    pub seed: Option<u64>,
    pub methods: Option<Vec<String>>,
    pub m_inits: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmSection {
    pub step_size: Option<f64>,
    pub max_iters: Option<usize>,
    pub rel_tol: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomSection {
    /// Support bound `B` on the projected atom coordinates.
    pub bound: Option<f64>,
    pub n_axis_candidates: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubspaceSection {
    /// `"identity"`, `"sample"`, or a path to an `L × L` CSV matrix.
    pub covariance: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub preset: Option<String>,
    pub replicates: Option<u64>,
    pub timing: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub features: Option<PathBuf>,
    pub counts: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Where the feature covariance for the subspace estimate comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Identity,
    Sample,
    File(PathBuf),
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::Format {
                path: origin.to_path_buf(),
                line,
                message: e.message().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    pub fn em_config(&self) -> EmConfig {
        let d = EmConfig::default();
        EmConfig {
            step_size: self.em.step_size.unwrap_or(d.step_size),
            step_sizes: None,
            max_iters: self.em.max_iters.unwrap_or(d.max_iters),
            rel_tol: self.em.rel_tol.unwrap_or(d.rel_tol),
            track_trace: true,
        }
    }

    pub fn covariance(&self) -> Covariance {
        match self.subspace.covariance.as_deref() {
            None | Some("identity") => Covariance::Identity,
            Some("sample") => Covariance::Sample,
            Some(path) => Covariance::File(PathBuf::from(path)),
        }
    }

    pub fn m_inits(&self) -> usize {
        self.scenario.m_inits.unwrap_or(10)
    }

    /// The `[scenario]` section as a benchmark scenario. `K`, `L`, `p`, `N` and the
    /// seed are required.
    pub fn scenario(&self) -> Result<Scenario> {
        let s = &self.scenario;
        let need = |v: Option<usize>, key: &str| v.ok_or_else(|| missing("scenario", key));
        let mut sc = Scenario::new(
            s.id.clone().unwrap_or_else(|| "scenario".into()),
            need(s.k, "k")?,
            need(s.l, "l")?,
            need(s.p, "p")?,
            s.n.ok_or_else(|| missing("scenario", "n"))?,
            s.seed.ok_or_else(|| missing("scenario", "seed"))?,
        );
        sc.m_inits = self.m_inits();
        if let Some(names) = &s.methods {
            sc.methods = names
                .iter()
                .map(|n| Method::parse(n, sc.m_inits))
                .collect::<Result<_>>()?;
        }
        sc.em = EmConfig {
            track_trace: false,
            ..self.em_config()
        };
        if let Some(b) = self.mom.bound {
            sc.bound = b;
        }
        if let Some(c) = self.mom.n_axis_candidates {
            sc.n_axis_candidates = c;
        }
        sc.record_wall_time = self.bench.timing.unwrap_or(false);
        sc.validate()?;
        Ok(sc)
    }
}

pub(crate) fn missing(section: &str, key: &str) -> Error {
    Error::InvalidInput(format!("missing `{key}` in [{section}] (or the matching flag)"))
}
