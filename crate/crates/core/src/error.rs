use thiserror::Error;

use crate::params::Family;

/// Errors raised by the simulation, training and measurement layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CfmError {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error("layer schedule mismatch: {0}")]
    ScheduleMismatch(String),

    #[error("operation `{op}` is not supported for the {family:?} family")]
    UnsupportedFamily { op: &'static str, family: Family },

    #[error("non-finite forward state at step {step} (layer {layer})")]
    NonFiniteState { step: usize, layer: usize },

    #[error("non-finite adjoint state at step {step}")]
    NonFiniteAdjoint { step: usize },

    #[error("sampler exceeded {limit} rejections for {spec}")]
    SamplerExhausted { limit: usize, spec: String },

    #[error("exact W1 needs n_a*n_b <= {cap}, got {n_a}x{n_b}; use w1_sliced for monitoring at this size")]
    W1SizeCap { n_a: usize, n_b: usize, cap: usize },

    #[error("bound violated: {0}")]
    BoundViolation(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("iteration {iteration}: {source}")]
    Training {
        iteration: usize,
        #[source]
        source: Box<CfmError>,
    },
}

impl CfmError {
    /// True for failures of the numerics (non-finite states, violated bounds),
    /// as opposed to bad inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            CfmError::NonFiniteState { .. }
            | CfmError::NonFiniteAdjoint { .. }
            | CfmError::BoundViolation(_) => true,
            CfmError::Training { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, CfmError>;

pub(crate) fn check_dim(expected: usize, got: usize, context: &'static str) -> Result<()> {
    if expected != got {
        return Err(CfmError::DimensionMismatch {
            expected,
            got,
            context,
        });
    }
    Ok(())
}
