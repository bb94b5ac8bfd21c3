//! Randomized audit of the closed-form velocity and flow bounds, plus the
//! measured constants the other experiments report against.
//!
//! Each draw uses its own `M` (largest block Frobenius norm) and `R`
//! (largest point norm), so the bound checked is the tightest one the draw
//! admits.

use serde::Serialize;
use serde_json::json;

use super::config::{ExperimentConfig, ExperimentKind};
use super::output::{meta_document, Artifact, Runner, Table};
use crate::adjoint::loss_and_gradient;
use crate::error::{CfmError, Result};
use crate::flow::integrate_forward;
use crate::linalg::{l2_norm, Mat};
use crate::params::{Family, LayerParams, ParameterPath, PathNorm};
use crate::population::{sample_ensemble, sample_point, PopulationSpec};
use crate::rng::RngHandle;
use crate::velocity::activation::gelu_alpha;
use crate::velocity::{eval_velocity, jac_x, kernel_form_eval, wasserstein_jac};
use rand::Rng;

/// Relative slack beyond which an observed value breaks its bound.
pub const BOUND_SLACK: f64 = 1e-8;
/// Absolute tolerance of the kernel identity.
pub const KERNEL_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    AttentionSpatial,
    AttentionWasserstein,
    MlpSpatial,
    KernelIdentity,
    SupportGrowth,
    GradientNorm,
}

impl Bound {
    pub const ALL: [Bound; 6] = [
        Bound::AttentionSpatial,
        Bound::AttentionWasserstein,
        Bound::MlpSpatial,
        Bound::KernelIdentity,
        Bound::SupportGrowth,
        Bound::GradientNorm,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Bound::AttentionSpatial => "attention_jac_x",
            Bound::AttentionWasserstein => "attention_wasserstein_jac",
            Bound::MlpSpatial => "mlp_jac_x",
            Bound::KernelIdentity => "kernel_identity",
            Bound::SupportGrowth => "support_growth",
            Bound::GradientNorm => "gradient_linf",
        }
    }

    pub fn formula(self) -> &'static str {
        match self {
            Bound::AttentionSpatial => "|D_x V|_op <= 4 M^3 R^2",
            Bound::AttentionWasserstein => "|grad_W V|_op <= exp(2 M^2 R^2) M (2 M^2 R^2 + 1)",
            Bound::MlpSpatial => "|D_x V|_op <= alpha M^2, alpha = sup |gelu'|",
            Bound::KernelIdentity => "|kernel form - V|_inf <= 1e-12",
            Bound::SupportGrowth => "max_i |z_i(s)| <= exp(|theta|_Linf) R (1 + 10 h)",
            Bound::GradientNorm => "measured only",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub bound: Bound,
    pub draw: usize,
    pub observed: f64,
    pub theoretical: Option<f64>,
}

impl Observation {
    pub fn ratio(&self) -> Option<f64> {
        self.theoretical.map(|t| if t > 0.0 { self.observed / t } else { 0.0 })
    }

    fn violates(&self) -> bool {
        match (self.bound, self.theoretical) {
            (Bound::KernelIdentity, Some(t)) => self.observed > t,
            (_, Some(t)) => self.observed > t * (1.0 + BOUND_SLACK),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerEntry {
    pub bound: Bound,
    pub formula: &'static str,
    pub samples: usize,
    pub max_observed: f64,
    pub max_ratio: Option<f64>,
    pub violations: usize,
    /// First violating draw.
    pub witness: Option<usize>,
}

/// Observed maxima against their closed forms, one entry per bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsLedger {
    pub m_bound: f64,
    pub radius: f64,
    pub entries: Vec<LedgerEntry>,
    /// `max |D_x V|_op + max |grad_W V|_op` over the attention draws.
    pub lipschitz_hat: f64,
    pub gradient_hat: f64,
}

impl BoundsLedger {
    pub fn entry(&self, b: Bound) -> &LedgerEntry {
        self.entries.iter().find(|e| e.bound == b).expect("every bound is audited")
    }

    pub fn total_violations(&self) -> usize {
        self.entries.iter().map(|e| e.violations).sum()
    }
}

pub struct AuditResult {
    pub observations: Vec<Observation>,
    pub ledger: BoundsLedger,
    pub artifact: Artifact,
}

fn block(d: usize, m: f64, r: &mut impl Rng) -> Mat {
    // half of the draws sit on the boundary of the norm ball, where the bounds are tightest
    let norm = if r.random::<bool>() { m } else { m * r.random::<f64>() };
    Mat::random_with_norm(d, d, norm, r)
}

fn max_point_norm(x: &[f64], mu: &crate::Ensemble) -> f64 {
    l2_norm(x).max(mu.max_norm())
}

fn velocity_draw(s: usize, d: usize, m: f64, pop: &PopulationSpec, max_n: usize, h: &RngHandle) -> Result<Vec<Observation>> {
    let mut r = h.named("blocks").rng();
    let n = r.random_range(1..=max_n);
    let x = sample_point(pop, &h.named("x"))?;
    let z = sample_point(pop, &h.named("z"))?;
    let mu = sample_ensemble(pop, n, &h.named("mu"))?;
    let radius = max_point_norm(&x, &mu).max(l2_norm(&z));

    let attn = LayerParams::Attention {
        q: block(d, m, &mut r),
        k: block(d, m, &mut r),
        v: block(d, m, &mut r),
    };
    let ma = attn.max_block_norm();
    let (m2r2, m3) = (ma * ma * radius * radius, ma * ma * ma);
    let jx = jac_x(&attn, &x, &mu)?.op_norm();
    let wj = wasserstein_jac(&attn, &x, &mu, &z)?.op_norm();
    let kf = kernel_form_eval(&attn, &x, &mu)?;
    let v = eval_velocity(&attn, &x, &mu)?;
    let kernel_gap = kf.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let mlp = LayerParams::Mlp {
        w1: block(d, m, &mut r),
        w2: block(d, m, &mut r),
        b: {
            let bn = m * r.random::<f64>();
            Mat::random_with_norm(d, 1, bn, &mut r).as_slice().to_vec()
        },
    };
    let LayerParams::Mlp { w1, w2, .. } = &mlp else { unreachable!() };
    let mm = w1.frobenius_norm().max(w2.frobenius_norm());
    let jm = jac_x(&mlp, &x, &mu)?.op_norm();

    let obs = |bound, observed, theoretical| Observation {
        bound,
        draw: s,
        observed,
        theoretical: Some(theoretical),
    };
    Ok(vec![
        obs(Bound::AttentionSpatial, jx, 4.0 * m3 * radius * radius),
        obs(Bound::AttentionWasserstein, wj, (2.0 * m2r2).exp() * ma * (2.0 * m2r2 + 1.0)),
        obs(Bound::MlpSpatial, jm, gelu_alpha() * mm * mm),
        obs(Bound::KernelIdentity, kernel_gap, KERNEL_TOLERANCE),
    ])
}

fn attention_path(layers: usize, d: usize, m: f64, r: &mut impl Rng) -> Result<ParameterPath> {
    ParameterPath::new(
        (0..layers)
            .map(|_| LayerParams::Attention {
                q: block(d, m, r),
                k: block(d, m, r),
                v: block(d, m, r),
            })
            .collect(),
    )
}

pub fn audit_bounds(cfg: &ExperimentConfig, runner: &Runner) -> Result<AuditResult> {
    let kind = ExperimentKind::LipschitzAudit;
    cfg.validate(kind)?;
    let a = &cfg.audit;
    if !(a.m_bound > 0.0 && a.radius > 0.0) || a.max_particles == 0 {
        return Err(CfmError::InvalidArgument("audit needs m_bound > 0, radius > 0, max_particles >= 1".into()));
    }
    let d = cfg.dim;
    let pop = PopulationSpec::uniform_ball(d, a.radius);
    let rng = cfg.master_rng(kind);
    let layers = cfg.params.schedule.len();
    let integ = cfg.integrator;

    let draws = runner.map(a.samples, |s| velocity_draw(s, d, a.m_bound, &pop, a.max_particles, &rng.named("velocity").child(s as u64)))?;
    let flows = runner.map(a.flow_instances, |s| {
        let h = rng.named("flow").child(s as u64);
        let theta = attention_path(layers, d, a.m_bound, &mut h.named("theta").rng())?;
        let n = h.named("n").rng().random_range(1..=a.max_particles.max(2) * 4);
        let mu0 = sample_ensemble(&pop, n, &h.named("mu"))?;
        let x0 = sample_point(&pop, &h.named("x"))?;
        let traj = integrate_forward(&x0, &mu0, &theta, &integ)?;
        let observed = traj.max_particle_norms().into_iter().fold(0.0, f64::max);
        let bound = theta.norm(PathNorm::Linf).exp() * max_point_norm(&x0, &mu0) * (1.0 + 10.0 * traj.step_size());
        Ok(Observation {
            bound: Bound::SupportGrowth,
            draw: s,
            observed,
            theoretical: Some(bound),
        })
    })?;
    let grads = runner.map(a.gradient_instances, |s| {
        let h = rng.named("gradient").child(s as u64);
        let mut r = h.named("theta").rng();
        let schedule: Vec<Family> = cfg.params.schedule.clone();
        let theta = ParameterPath::new(
            schedule
                .iter()
                .map(|f| match f {
                    Family::Mlp => LayerParams::Mlp {
                        w1: block(d, a.m_bound, &mut r),
                        w2: block(d, a.m_bound, &mut r),
                        b: vec![0.0; d],
                    },
                    _ => LayerParams::Attention {
                        q: block(d, a.m_bound, &mut r),
                        k: block(d, a.m_bound, &mut r),
                        v: block(d, a.m_bound, &mut r),
                    },
                })
                .collect(),
        )?;
        let mu0 = sample_ensemble(&pop, a.max_particles, &h.named("mu"))?;
        let x0 = sample_point(&pop, &h.named("x"))?;
        let y0 = sample_point(&pop, &h.named("y"))?;
        let eval = loss_and_gradient(&x0, &mu0, &y0, &theta, &integ)?;
        Ok(Observation {
            bound: Bound::GradientNorm,
            draw: s,
            observed: eval.grad.norm_linf(),
            theoretical: None,
        })
    })?;
    let mut observations: Vec<Observation> = draws.into_iter().flatten().collect();
    observations.sort_by_key(|o| Bound::ALL.iter().position(|b| *b == o.bound));
    observations.extend(flows);
    observations.extend(grads);

    let entries: Vec<LedgerEntry> = Bound::ALL
        .iter()
        .map(|&b| {
            let sel: Vec<&Observation> = observations.iter().filter(|o| o.bound == b).collect();
            LedgerEntry {
                bound: b,
                formula: b.formula(),
                samples: sel.len(),
                max_observed: sel.iter().map(|o| o.observed).fold(0.0, f64::max),
                max_ratio: sel.iter().filter_map(|o| o.ratio()).reduce(f64::max),
                violations: sel.iter().filter(|o| o.violates()).count(),
                witness: sel.iter().find(|o| o.violates()).map(|o| o.draw),
            }
        })
        .collect();
    let max_of = |b: Bound| entries.iter().find(|e| e.bound == b).map_or(0.0, |e| e.max_observed);
    let ledger = BoundsLedger {
        m_bound: a.m_bound,
        radius: a.radius,
        lipschitz_hat: max_of(Bound::AttentionSpatial) + max_of(Bound::AttentionWasserstein),
        gradient_hat: max_of(Bound::GradientNorm),
        entries,
    };

    let mut raw = Table::new(&["bound", "draw", "observed", "theoretical", "ratio"]);
    for o in &observations {
        raw.push(vec![o.bound.id().into(), o.draw.into(), o.observed.into(), o.theoretical.into(), o.ratio().into()]);
    }
    let mut summary = Table::new(&["bound", "samples", "max_observed", "max_ratio", "violations"]);
    for e in &ledger.entries {
        summary.push(vec![e.bound.id().into(), e.samples.into(), e.max_observed.into(), e.max_ratio.into(), e.violations.into()]);
    }
    let meta = meta_document(
        kind.id(),
        cfg.name(),
        cfg,
        json!({"master_seed": cfg.master_seed, "streams": "velocity/s, flow/s, gradient/s"}),
        json!({
            "ledger": ledger,
            "slack": {"relative": BOUND_SLACK, "kernel_absolute": KERNEL_TOLERANCE, "support_discrete": "1 + 10 h"},
            "empirical_constants": {
                "lipschitz_hat": "max |D_x V|_op + max |grad_W V|_op over the attention draws",
                "gradient_hat": "max gradient L-inf norm over the gradient instances",
            },
        }),
    );
    Ok(AuditResult {
        observations,
        ledger,
        artifact: Artifact {
            experiment: kind.id(),
            name: cfg.name().to_string(),
            raw,
            summary,
            meta,
        },
    })
}

/// [`audit_bounds`], failing hard on any violation.
pub fn exp_lipschitz_audit(cfg: &ExperimentConfig, runner: &Runner) -> Result<AuditResult> {
    let res = audit_bounds(cfg, runner)?;
    if let Some(e) = res.ledger.entries.iter().find(|e| e.violations > 0) {
        return Err(CfmError::BoundViolation(format!(
            "{} ({}): {} violations, first at draw {}",
            e.bound.id(),
            e.formula,
            e.violations,
            e.witness.unwrap_or(0)
        )));
    }
    Ok(res)
}
