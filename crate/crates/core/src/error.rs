//! Error type shared by every estimator in the crate.

use std::path::PathBuf;

use thiserror::Error;

use crate::mom::MomResult;

pub type Result<T> = std::result::Result<T, Error>;

/// Pipeline stage of the moment estimator, attached to failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomStage {
    Frame,
    Moments,
    Projection,
    Roots,
    Coordinates,
    Weights,
}

impl std::fmt::Display for MomStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MomStage::Frame => "frame",
            MomStage::Moments => "moments",
            MomStage::Projection => "projection",
            MomStage::Roots => "roots",
            MomStage::Coordinates => "coordinates",
            MomStage::Weights => "weights",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numeric degeneracy: {0}")]
    NumericDegeneracy(String),

    #[error("log-likelihood became non-finite at iteration {iteration}")]
    NonFiniteLikelihood { iteration: usize },

    #[error("moment degree {degree} exceeds the configured cap {cap}")]
    UnsupportedDegree { degree: usize, cap: usize },

    #[error("moment projection did not converge (final infeasibility {infeasibility:e})")]
    ProjectionFailure { infeasibility: f64 },

    #[error("Hankel moment matrix is numerically singular (condition number {condition:e})")]
    DegenerateMoments { condition: f64 },

    #[error("recovered root {real} + {imag}i is not real")]
    ComplexRoot { real: f64, imag: f64 },

    #[error("no candidate axis produced a valid projected moment vector")]
    AxisSelection,

    #[error("eigen-decomposition failed: {0}")]
    Eigen(String),

    #[error("moment estimator failed at stage {stage}: {source}")]
    MomFailure {
        stage: MomStage,
        #[source]
        source: Box<Error>,
        /// Estimate assembled from the real parts of the roots, when one exists.
        partial: Option<Box<MomResult>>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn at_stage(self, stage: MomStage) -> Self {
        match self {
            e @ Error::MomFailure { .. } => e,
            e => Error::MomFailure {
                stage,
                source: Box::new(e),
                partial: None,
            },
        }
    }

    /// True for failures of the moment estimator that callers record instead of aborting.
    pub fn is_method_failure(&self) -> bool {
        matches!(
            self,
            Error::MomFailure { .. }
                | Error::ComplexRoot { .. }
                | Error::DegenerateMoments { .. }
                | Error::ProjectionFailure { .. }
                | Error::AxisSelection
        )
    }
}
