//! Growth of the particle support along attention flows against
//! `R exp(int_0^s |theta(u)| du)`, which at `s = 1` is at most `R exp(|theta|_Linf)`.

use serde_json::json;

use super::config::{ExperimentConfig, ExperimentKind};
use super::output::{meta_document, Artifact, Runner, Table};
use crate::error::Result;
use crate::flow::integrate_forward;
use crate::linalg::l2_norm;
use crate::params::ParameterPath;
use crate::population::{sample_ensemble, sample_point};

#[derive(Debug, Clone, PartialEq)]
pub struct SupportRow {
    pub instance: usize,
    pub s: f64,
    pub max_particle_norm: f64,
    pub bound: f64,
}

pub struct SupportResult {
    pub rows: Vec<SupportRow>,
    /// `max(0, max norm / bound - 1)` over all instances and grid points.
    pub overshoot: f64,
    /// Points above `bound (1 + 10 h)`.
    pub violations: usize,
    pub artifact: Artifact,
}

/// `R exp(int_0^s |theta|)` for a layered path, evaluated on the grid.
fn growth_bound(theta: &ParameterPath, grid: &[f64], radius: f64) -> Vec<f64> {
    let l = theta.num_layers() as f64;
    let norms: Vec<f64> = theta.layers().iter().map(|p| p.norm()).collect();
    grid.iter()
        .map(|&s| {
            let mut integral = 0.0;
            for (i, nrm) in norms.iter().enumerate() {
                let (a, b) = (i as f64 / l, (i + 1) as f64 / l);
                integral += nrm * (s.min(b) - a).max(0.0);
            }
            radius * integral.exp()
        })
        .collect()
}

pub fn exp_support_growth(cfg: &ExperimentConfig, runner: &Runner) -> Result<SupportResult> {
    let kind = ExperimentKind::SupportGrowth;
    cfg.validate(kind)?;
    let pop = cfg.population_spec()?;
    let n = cfg.support.n.unwrap_or(cfg.n_list[0]);
    let rng = cfg.master_rng(kind);
    let schedule = cfg.params.schedule.clone();
    let per = runner.map(cfg.support.instances, |i| {
        let h = rng.child(i as u64);
        let theta = ParameterPath::random(&schedule, cfg.dim, cfg.params.init_scale, &mut h.named("theta").rng())?;
        let x0 = sample_point(&pop, &h.named("x0"))?;
        let mu0 = sample_ensemble(&pop, n, &h.named("context"))?;
        let traj = integrate_forward(&x0, &mu0, &theta, &cfg.integrator)?;
        let radius = mu0.max_norm().max(l2_norm(&x0));
        let bounds = growth_bound(&theta, &traj.grid, radius);
        Ok((
            traj.step_size(),
            traj.grid
                .iter()
                .zip(traj.max_particle_norms())
                .zip(bounds)
                .map(|((&s, m), b)| SupportRow {
                    instance: i,
                    s,
                    max_particle_norm: m,
                    bound: b,
                })
                .collect::<Vec<_>>(),
        ))
    })?;
    let h = per.first().map_or(1.0, |p| p.0);
    let rows: Vec<SupportRow> = per.into_iter().flat_map(|p| p.1).collect();
    let overshoot = rows.iter().map(|r| r.max_particle_norm / r.bound - 1.0).fold(0.0, f64::max);
    let violations = rows.iter().filter(|r| r.max_particle_norm > r.bound * (1.0 + 10.0 * h)).count();

    let mut raw = Table::new(&["instance", "s", "max_particle_norm", "bound"]);
    for r in &rows {
        raw.push(vec![r.instance.into(), r.s.into(), r.max_particle_norm.into(), r.bound.into()]);
    }
    let mut summary = Table::new(&["s", "max_particle_norm", "max_ratio"]);
    let grid: Vec<f64> = rows.iter().filter(|r| r.instance == 0).map(|r| r.s).collect();
    for (k, s) in grid.iter().enumerate() {
        let col: Vec<&SupportRow> = rows.iter().skip(k).step_by(grid.len()).collect();
        summary.push(vec![
            (*s).into(),
            col.iter().map(|r| r.max_particle_norm).fold(0.0, f64::max).into(),
            col.iter().map(|r| r.max_particle_norm / r.bound).fold(0.0, f64::max).into(),
        ]);
    }
    let meta = meta_document(
        kind.id(),
        cfg.name(),
        cfg,
        json!({"master_seed": cfg.master_seed, "streams": "instance i: theta, x0, context <- child(i)"}),
        json!({"n": n, "overshoot": overshoot, "violations": violations, "discrete_slack": 10.0 * h}),
    );
    Ok(SupportResult {
        rows,
        overshoot,
        violations,
        artifact: Artifact {
            experiment: kind.id(),
            name: cfg.name().to_string(),
            raw,
            summary,
            meta,
        },
    })
}
