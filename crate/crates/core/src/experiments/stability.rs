//! Response of the flow and of the gradient to perturbations of the context,
//! of the token and of one layer of the path, on a halving ladder of sizes.

use serde_json::json;

use super::config::{ExperimentConfig, ExperimentKind};
use super::output::{meta_document, Artifact, Cell, Runner, Table};
use crate::adjoint::loss_and_gradient;
use crate::ensemble::Ensemble;
use crate::error::{CfmError, Result};
use crate::flow::sup_token_deviation;
use crate::linalg::l2_norm;
use crate::metrics::w1;
use crate::params::{path_linf_distance, LayerParams, ParameterPath};
use crate::population::{sample_ensemble, sample_point};
use crate::rng::RngHandle;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Context,
    Token,
    Theta,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Context, Axis::Token, Axis::Theta];

    pub fn id(self) -> &'static str {
        match self {
            Axis::Context => "mu0",
            Axis::Token => "x0",
            Axis::Theta => "theta",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Output {
    SupToken,
    SupW1,
    Gradient,
}

impl Output {
    pub const ALL: [Output; 3] = [Output::SupToken, Output::SupW1, Output::Gradient];

    pub fn id(self) -> &'static str {
        match self {
            Output::SupToken => "sup_dev_x",
            Output::SupW1 => "sup_w1",
            Output::Gradient => "grad_linf",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRow {
    pub instance: usize,
    pub axis: Axis,
    pub rung: usize,
    pub input_delta: f64,
    pub output: Output,
    pub output_delta: f64,
}

impl StabilityRow {
    /// Zero over zero counts as zero.
    pub fn ratio(&self) -> f64 {
        if self.output_delta == 0.0 {
            0.0
        } else {
            self.output_delta / self.input_delta
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxisSummary {
    pub axis: Axis,
    pub output: Output,
    pub max_ratio: f64,
    /// Range of `output(rung + 1) / output(rung)` over instances and rungs;
    /// `None` when the output never moves.
    pub halving: Option<(f64, f64)>,
}

pub struct StabilityResult {
    pub rows: Vec<StabilityRow>,
    pub summaries: Vec<AxisSummary>,
    /// Per axis, the largest `(grad ratio / flow ratio)` over all rungs
    /// divided by its value on the coarsest rung.
    pub amplification_drift: Vec<(Axis, f64)>,
    pub artifact: Artifact,
}

fn unit_vector(d: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
    let mut u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let norm = l2_norm(&u);
    u.iter_mut().for_each(|c| *c /= norm);
    u
}

/// Random perturbation of the first layer, normalized to unit L-inf path distance.
fn layer_direction(theta: &ParameterPath, rng: &RngHandle) -> Result<ParameterPath> {
    let d = theta.dim();
    let mut layers: Vec<LayerParams> = theta.layers().iter().map(|l| LayerParams::zeros(l.family(), d)).collect();
    layers[0] = LayerParams::random(layers[0].family(), d, 1.0, &mut rng.rng());
    let dir = ParameterPath::new(layers)?;
    let zero = ParameterPath::zeros(&theta.schedule(), d)?;
    let scale = path_linf_distance(&dir, &zero)?;
    dir.combine(1.0 / scale, 0.0, &dir)
}

fn sup_w1(a: &[Ensemble], b: &[Ensemble]) -> Result<f64> {
    a.iter().zip(b).try_fold(0.0f64, |m, (p, q)| Ok(m.max(w1(p, q)?)))
}

pub fn exp_stability(cfg: &ExperimentConfig, runner: &Runner) -> Result<StabilityResult> {
    let kind = ExperimentKind::Stability;
    cfg.validate(kind)?;
    let st = &cfg.stability;
    if st.rungs < 2 || st.instances == 0 || !(st.base_delta >= 0.0) {
        return Err(CfmError::InvalidArgument("stability needs rungs >= 2, instances >= 1 and base_delta >= 0".into()));
    }
    let pop = cfg.population_spec()?;
    let theta = cfg.theta()?;
    let n = st.n.unwrap_or(cfg.n_list[0]);
    let rng = cfg.master_rng(kind);
    let integ = cfg.integrator;
    let per_instance = runner.map(st.instances, |i| {
        let h = rng.child(i as u64);
        let x0 = sample_point(&pop, &h.named("x0"))?;
        let mu0 = sample_ensemble(&pop, n, &h.named("context"))?;
        let y0 = sample_point(&pop, &h.named("y0"))?;
        let base = loss_and_gradient(&x0, &mu0, &y0, &theta, &integ)?;
        let mut r = h.named("directions").rng();
        let ux = unit_vector(cfg.dim, &mut r);
        let umu: Vec<Vec<f64>> = (0..n).map(|_| unit_vector(cfg.dim, &mut r)).collect();
        let dtheta = layer_direction(&theta, &h.named("layer"))?;
        let mut rows = Vec::new();
        for axis in Axis::ALL {
            for rung in 0..st.rungs {
                let delta = st.base_delta * 0.5f64.powi(rung as i32);
                let (x, mu, th, input) = match axis {
                    Axis::Token => {
                        let x: Vec<f64> = x0.iter().zip(&ux).map(|(a, u)| a + delta * u).collect();
                        (x, mu0.clone(), theta.clone(), delta)
                    }
                    Axis::Context => {
                        let coords: Vec<f64> = mu0.iter().zip(&umu).flat_map(|(z, u)| z.iter().zip(u).map(|(a, b)| a + delta * b).collect::<Vec<_>>()).collect();
                        let mu = Ensemble::new(cfg.dim, coords)?;
                        let input = w1(&mu0, &mu)?;
                        (x0.clone(), mu, theta.clone(), input)
                    }
                    Axis::Theta => {
                        let th = theta.combine(1.0, delta, &dtheta)?;
                        let input = path_linf_distance(&theta, &th)?;
                        (x0.clone(), mu0.clone(), th, input)
                    }
                };
                let pert = loss_and_gradient(&x, &mu, &y0, &th, &integ)?;
                let outputs = [
                    (Output::SupToken, sup_token_deviation(&base.traj, &pert.traj)?),
                    (Output::SupW1, sup_w1(&base.traj.particle_states, &pert.traj.particle_states)?),
                    (Output::Gradient, base.grad.linf_distance(&pert.grad)?),
                ];
                for (output, value) in outputs {
                    rows.push(StabilityRow {
                        instance: i,
                        axis,
                        rung,
                        input_delta: input,
                        output,
                        output_delta: value,
                    });
                }
            }
        }
        Ok(rows)
    })?;
    let rows: Vec<StabilityRow> = per_instance.into_iter().flatten().collect();

    let find = |i: usize, a: Axis, r: usize, o: Output| rows.iter().find(|x| x.instance == i && x.axis == a && x.rung == r && x.output == o).expect("row");
    let mut summaries = Vec::new();
    for axis in Axis::ALL {
        for output in Output::ALL {
            let sel = rows.iter().filter(|r| r.axis == axis && r.output == output);
            let max_ratio = sel.map(StabilityRow::ratio).fold(0.0, f64::max);
            let mut factors = Vec::new();
            for i in 0..st.instances {
                for rung in 0..st.rungs - 1 {
                    let (a, b) = (find(i, axis, rung, output).output_delta, find(i, axis, rung + 1, output).output_delta);
                    if a > 0.0 {
                        factors.push(b / a);
                    }
                }
            }
            let halving = (!factors.is_empty()).then(|| (factors.iter().copied().fold(f64::INFINITY, f64::min), factors.iter().copied().fold(0.0, f64::max)));
            summaries.push(AxisSummary {
                axis,
                output,
                max_ratio,
                halving,
            });
        }
    }
    let mut amplification_drift = Vec::new();
    for axis in Axis::ALL {
        let mut drift: f64 = 0.0;
        for i in 0..st.instances {
            let amp = |rung: usize| {
                let g = find(i, axis, rung, Output::Gradient).output_delta;
                let f = find(i, axis, rung, Output::SupToken).output_delta;
                if f > 0.0 {
                    Some(g / f)
                } else {
                    None
                }
            };
            if let Some(a0) = amp(0).filter(|a| *a > 0.0) {
                for rung in 0..st.rungs {
                    if let Some(a) = amp(rung) {
                        drift = drift.max(a / a0);
                    }
                }
            }
        }
        amplification_drift.push((axis, drift));
    }

    let mut raw = Table::new(&["instance", "perturbation_kind", "rung", "input_delta", "output_kind", "output_delta", "ratio"]);
    for r in &rows {
        raw.push(vec![
            r.instance.into(),
            r.axis.id().into(),
            r.rung.into(),
            r.input_delta.into(),
            r.output.id().into(),
            r.output_delta.into(),
            r.ratio().into(),
        ]);
    }
    let mut summary = Table::new(&["perturbation_kind", "output_kind", "max_ratio", "min_halving", "max_halving"]);
    for s in &summaries {
        summary.push(vec![
            s.axis.id().into(),
            s.output.id().into(),
            s.max_ratio.into(),
            s.halving.map(|h| h.0).into(),
            s.halving.map(|h| h.1).into(),
        ]);
    }
    for (axis, drift) in &amplification_drift {
        summary.push(vec![axis.id().into(), "grad_over_flow_drift".into(), (*drift).into(), Cell::Empty, Cell::Empty]);
    }
    let meta = meta_document(
        kind.id(),
        cfg.name(),
        cfg,
        json!({"master_seed": cfg.master_seed, "params_seed": cfg.params.seed}),
        json!({
            "n": n,
            "ladder": (0..st.rungs).map(|r| st.base_delta * 0.5f64.powi(r as i32)).collect::<Vec<_>>(),
            "inputs": {"mu0": "exact W1 between contexts", "x0": "token shift", "theta": "L-inf path distance, first layer only"},
            "empirical_constants": {"max_ratio": "largest output/input ratio over instances and rungs"},
        }),
    );
    Ok(StabilityResult {
        rows,
        summaries,
        amplification_drift,
        artifact: Artifact {
            experiment: kind.id(),
            name: cfg.name().to_string(),
            raw,
            summary,
            meta,
        },
    })
}
