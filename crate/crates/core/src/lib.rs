//! Contextual flow maps: token/particle transport by mean-field velocity
//! fields, adjoint gradients along characteristics, online training and
//! propagation-of-chaos experiments.

pub mod adjoint;
pub mod csv;
pub mod ensemble;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod linalg;
pub mod metrics;
pub mod oracle;
pub mod params;
pub mod population;
pub mod rng;
pub mod train;
pub mod velocity;

pub use ensemble::Ensemble;
pub use error::{CfmError, Result};
pub use linalg::Mat;
pub use params::{Family, LayerParams, LossGradient, ParameterPath};
pub use rng::RngHandle;
