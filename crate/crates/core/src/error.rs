use thiserror::Error;

use crate::fockspace::DensityMatrix;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid Fock dimensions ({d_e}, {d_l}): each mode needs at least 2 levels")]
    InvalidDims { d_e: usize, d_l: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("degenerate state: normalization {norm:e} below threshold")]
    DegenerateState { norm: f64 },

    #[error("moment ({w},{x},{y},{z}) is not representable in a ({d_e},{d_l}) truncation")]
    OutOfTruncation {
        w: usize,
        x: usize,
        y: usize,
        z: usize,
        d_e: usize,
        d_l: usize,
    },

    #[error("time grid too short: captured {captured:.6} of the envelope norm")]
    GridCoverage { captured: f64 },

    #[error("degenerate coupled-mode eigenvalues: no swap oscillation")]
    DegenerateEigenvalues,

    #[error("integration did not converge within {horizon:e} s (residual energy {residual:e})")]
    IntegrationHorizon { horizon: f64, residual: f64 },

    #[error("envelope support ({needed} samples) exceeds the record ({available} samples)")]
    EnvelopeSupport { needed: usize, available: usize },

    #[error("rejection sampler acceptance {acceptance:e} below 1e-4 (bound {bound:e})")]
    SamplerAcceptance { acceptance: f64, bound: f64 },

    #[error("insufficient data: {got} records, need at least {need}")]
    InsufficientData { got: usize, need: usize },

    #[error("missing moment ({k},{l},{m},{n}) in {tensor}")]
    MissingMoment {
        k: usize,
        l: usize,
        m: usize,
        n: usize,
        tensor: &'static str,
    },

    #[error("incompatible moment tensors: {0}")]
    IncompatibleTensors(String),

    #[error("{0} is undefined for these inputs")]
    Undefined(&'static str),

    #[error("optimizer did not converge after {iterations} iterations (objective {objective:e})")]
    NonConvergent {
        iterations: usize,
        objective: f64,
        best: Box<DensityMatrix>,
    },

    #[error("bootstrap failed: {failed} of {total} iterations did not converge")]
    BootstrapFailures { failed: usize, total: usize },

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// Wrap an error with the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
