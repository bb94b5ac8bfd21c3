//! Configured experiments. Every run produces an [`Artifact`]: raw rows, a
//! summary that can be recomputed from them, and a meta document echoing the
//! configuration and seeds.

pub mod audit;
pub mod backward_poc;
pub mod config;
pub mod forward_poc;
pub mod grad_check;
pub mod output;
pub mod selftest;
pub mod single;
pub mod stability;
pub mod support;

pub use audit::{exp_lipschitz_audit, AuditResult, BoundsLedger};
pub use backward_poc::{exp_backward_poc, BackwardPocResult};
pub use config::{ExperimentConfig, ExperimentKind};
pub use forward_poc::{exp_forward_poc, ForwardPocResult};
pub use grad_check::{exp_grad_check, GradCheckResult};
pub use output::{Artifact, Runner, Table};
pub use single::{exp_forward, exp_ogd};
pub use stability::{exp_stability, StabilityResult};
pub use support::{exp_support_growth, SupportResult};

use crate::error::Result;

/// Runs one experiment and returns its artifact.
pub fn run_experiment(kind: ExperimentKind, cfg: &ExperimentConfig, runner: &Runner) -> Result<Artifact> {
    Ok(match kind {
        ExperimentKind::Forward => exp_forward(cfg)?.artifact,
        ExperimentKind::Ogd => exp_ogd(cfg)?.artifact,
        ExperimentKind::GradCheck => exp_grad_check(cfg, runner)?.artifact,
        ExperimentKind::ForwardPoc => exp_forward_poc(cfg, runner)?.artifact,
        ExperimentKind::BackwardPoc => exp_backward_poc(cfg, runner)?.artifact,
        ExperimentKind::Stability => exp_stability(cfg, runner)?.artifact,
        ExperimentKind::LipschitzAudit => exp_lipschitz_audit(cfg, runner)?.artifact,
        ExperimentKind::SupportGrowth => exp_support_growth(cfg, runner)?.artifact,
    })
}
