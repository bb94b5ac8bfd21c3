//! Adjoint gradient against central differences over a grid of families,
//! depths and context sizes, or over randomly drawn cells.

use rand::seq::IndexedRandom;
use serde_json::json;

use super::config::{ExperimentConfig, ExperimentKind, ScheduleKind};
use super::output::{meta_document, Artifact, Runner, Table};
use crate::adjoint::{gradient_fd_check, FdReport};
use crate::error::{CfmError, Result};
use crate::params::ParameterPath;
use crate::population::{sample_ensemble, sample_point, Context, Sample};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub schedule: ScheduleKind,
    pub layers: usize,
    pub dim: usize,
    pub n: usize,
}

/// Tightest relative error the cell is held to.
pub fn tolerance(c: &Cell) -> f64 {
    match c.schedule {
        ScheduleKind::Mlp => 1e-5,
        ScheduleKind::Attention if c.n == 1 => 1e-4,
        _ => 1e-3,
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub cell: Cell,
    pub report: FdReport,
    pub tolerance: f64,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= self.tolerance
    }
}

pub struct GradCheckResult {
    pub rows: Vec<GradCheckRow>,
    pub artifact: Artifact,
}

fn cells(cfg: &ExperimentConfig) -> Result<Vec<Cell>> {
    let g = &cfg.grad_check;
    if g.schedules.is_empty() || g.layers.is_empty() || g.contexts.is_empty() || g.dims.is_empty() {
        return Err(CfmError::InvalidArgument("grad_check lists must be non-empty".into()));
    }
    if g.layers.contains(&0) || g.contexts.contains(&0) || g.dims.contains(&0) {
        return Err(CfmError::InvalidArgument("grad_check sizes must be >= 1".into()));
    }
    if g.random_instances > 0 {
        let rng = cfg.master_rng(ExperimentKind::GradCheck).named("cells");
        return Ok((0..g.random_instances)
            .map(|i| {
                let mut r = rng.child(i as u64).rng();
                Cell {
                    schedule: *g.schedules.choose(&mut r).unwrap(),
                    layers: *g.layers.choose(&mut r).unwrap(),
                    dim: *g.dims.choose(&mut r).unwrap(),
                    n: *g.contexts.choose(&mut r).unwrap(),
                }
            })
            .collect());
    }
    let mut out = Vec::new();
    for &dim in &g.dims {
        for &schedule in &g.schedules {
            for &layers in &g.layers {
                for &n in &g.contexts {
                    out.push(Cell { schedule, layers, dim, n });
                }
            }
        }
    }
    Ok(out)
}

pub fn exp_grad_check(cfg: &ExperimentConfig, runner: &Runner) -> Result<GradCheckResult> {
    let kind = ExperimentKind::GradCheck;
    cfg.validate(kind)?;
    let cells = cells(cfg)?;
    let rng = cfg.master_rng(kind);
    let reports = runner.map(cells.len(), |i| {
        let c = cells[i];
        let h = rng.child(i as u64);
        let pop = cfg.population.spec(c.dim)?;
        let theta = ParameterPath::random(&c.schedule.schedule(c.layers), c.dim, cfg.params.init_scale, &mut h.named("theta").rng())?;
        let sample = Sample {
            x0: sample_point(&pop, &h.named("x0"))?,
            context: Context::Explicit(sample_ensemble(&pop, c.n, &h.named("context"))?),
            y0: sample_point(&pop, &h.named("y0"))?,
        };
        gradient_fd_check(&sample, c.n, &theta, &cfg.integrator, cfg.grad_check.directions, &h.named("check"))
    })?;
    let rows: Vec<GradCheckRow> = cells
        .into_iter()
        .zip(reports)
        .map(|(cell, report)| GradCheckRow {
            tolerance: tolerance(&cell),
            cell,
            report,
        })
        .collect();

    let mut raw = Table::new(&[
        "cell",
        "schedule",
        "layers",
        "dim",
        "n",
        "substeps",
        "max_rel_error",
        "max_rel_error_refined",
        "observed_order",
        "max_rel_fd_noise",
        "at_resolution_limit",
        "tolerance",
        "passed",
    ]);
    for (i, r) in rows.iter().enumerate() {
        raw.push(vec![
            i.into(),
            r.cell.schedule.id().into(),
            r.cell.layers.into(),
            r.cell.dim.into(),
            r.cell.n.into(),
            r.report.substeps.into(),
            r.report.max_rel_error.into(),
            r.report.max_rel_error_refined.into(),
            r.report.observed_order().into(),
            r.report.max_rel_fd_noise.into(),
            r.report.at_resolution_limit().into(),
            r.tolerance.into(),
            r.passed().into(),
        ]);
    }
    let mut summary = Table::new(&["schedule", "cells", "max_rel_error", "max_rel_error_refined", "failures"]);
    for s in cfg.grad_check.schedules.iter() {
        let sel: Vec<&GradCheckRow> = rows.iter().filter(|r| r.cell.schedule == *s).collect();
        if sel.is_empty() {
            continue;
        }
        summary.push(vec![
            s.id().into(),
            sel.len().into(),
            sel.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max).into(),
            sel.iter().map(|r| r.report.max_rel_error_refined).fold(0.0, f64::max).into(),
            sel.iter().filter(|r| !r.passed()).count().into(),
        ]);
    }
    let meta = meta_document(
        kind.id(),
        cfg.name(),
        cfg,
        json!({"master_seed": cfg.master_seed, "streams": "cell i: theta, x0, context, y0, check <- child(i)"}),
        json!({
            "fd_step": crate::adjoint::FD_STEP,
            "relative_error": "|analytic - fd| / max(|fd|, 0.01 |grad|)",
            "tolerances": {"mlp": 1e-5, "attention_n1": 1e-4, "other": 1e-3},
        }),
    );
    Ok(GradCheckResult {
        rows,
        artifact: Artifact {
            experiment: kind.id(),
            name: cfg.name().to_string(),
            raw,
            summary,
            meta,
        },
    })
}
