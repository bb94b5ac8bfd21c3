//! Single forward trajectory and single OGD run.

use serde_json::json;

use super::backward_poc::resolve_lambda;
use super::config::{ExperimentConfig, ExperimentKind};
use super::output::{meta_document, Artifact, Cell, Table};
use crate::error::Result;
use crate::flow::{integrate_forward, output_token, Trajectory};
use crate::population::{sample_ensemble, sample_point, Context};
use crate::train::{run_ogd, OgdConfig, PairStream, TrainLog};

pub struct ForwardResult {
    pub x0: Vec<f64>,
    pub trajectory: Trajectory,
    pub artifact: Artifact,
}

/// Raw rows match [`Trajectory::write_csv`]: `step, s, kind, particle_index, coord_*`.
pub fn exp_forward(cfg: &ExperimentConfig) -> Result<ForwardResult> {
    let kind = ExperimentKind::Forward;
    cfg.validate(kind)?;
    let pop = cfg.population_spec()?;
    let theta = cfg.theta()?;
    let rng = cfg.master_rng(kind);
    let x0 = match &cfg.forward.token {
        Some(t) => t.clone(),
        None => sample_point(&pop, &rng.named("x0"))?,
    };
    let n = cfg.n_list[0];
    let mu0 = sample_ensemble(&pop, n, &rng.named("context"))?;
    let traj = integrate_forward(&x0, &mu0, &theta, &cfg.integrator)?;

    let mut header = vec!["step".to_string(), "s".into(), "kind".into(), "particle_index".into()];
    header.extend((0..cfg.dim).map(|c| format!("coord_{c}")));
    let mut raw = Table {
        header,
        rows: Vec::new(),
    };
    for (k, s) in traj.grid.iter().enumerate() {
        let mut row = vec![k.into(), (*s).into(), "token".into(), Cell::Empty];
        row.extend(traj.x_states[k].iter().map(|v| Cell::Real(*v)));
        raw.push(row);
        for (i, z) in traj.particle_states[k].iter().enumerate() {
            let mut row = vec![k.into(), (*s).into(), "particle".into(), i.into()];
            row.extend(z.iter().map(|v| Cell::Real(*v)));
            raw.push(row);
        }
    }
    let mut summary = Table::new(&["metric", "index", "value"]);
    for (c, v) in output_token(&traj).iter().enumerate() {
        summary.push(vec!["output_token".into(), c.into(), (*v).into()]);
    }
    for (k, v) in traj.max_particle_norms().iter().enumerate() {
        summary.push(vec!["max_particle_norm".into(), k.into(), (*v).into()]);
    }
    let meta = meta_document(
        kind.id(),
        cfg.name(),
        cfg,
        json!({"master_seed": cfg.master_seed, "params_seed": cfg.params.seed}),
        json!({"n": n, "steps": traj.num_steps()}),
    );
    Ok(ForwardResult {
        x0,
        trajectory: traj,
        artifact: Artifact {
            experiment: kind.id(),
            name: cfg.name().to_string(),
            raw,
            summary,
            meta,
        },
    })
}

pub struct OgdResult {
    pub log: TrainLog,
    pub lambda: f64,
    pub artifact: Artifact,
}

/// One trainer on `n_list[0]`-particle population contexts.
pub fn exp_ogd(cfg: &ExperimentConfig) -> Result<OgdResult> {
    let kind = ExperimentKind::Ogd;
    cfg.validate(kind)?;
    let pop = cfg.population_spec()?;
    let theta0 = cfg.theta()?;
    let ogd = cfg.ogd()?;
    let integrator = ogd.integrator.unwrap_or(cfg.integrator);
    let rng = cfg.master_rng(kind);
    let n = cfg.n_list[0];
    let (lambda, g_hat) = resolve_lambda(ogd, &theta0, &pop, n, &integrator, &rng)?;
    let ocfg = OgdConfig {
        eta: ogd.eta,
        lambda,
        iterations: ogd.iterations,
        integrator,
    };
    let stream = PairStream::new(pop.clone(), ogd.target.clone(), ogd.stream, rng.named("pairs"))?;
    let samples = stream.samples(ogd.iterations, &Context::Population(pop))?;
    let log = run_ogd(&theta0, &samples, n, &ocfg, &rng.named("contexts"))?;

    let mut raw = Table::new(&["k", "loss_emp", "theta_linf", "grad_linf"]);
    for r in &log.records {
        raw.push(vec![r.k.into(), r.loss_emp.into(), r.theta_linf.into(), r.grad_linf.into()]);
    }
    let losses: Vec<f64> = log.records.iter().filter_map(|r| r.loss_emp).collect();
    let tail = &losses[losses.len() - losses.len().min(ogd.window_split.max(1))..];
    let mut summary = Table::new(&["metric", "value"]);
    summary.push(vec!["iterations".into(), log.iterations().into()]);
    summary.push(vec!["final_theta_linf".into(), log.records.last().expect("log").theta_linf.into()]);
    summary.push(vec!["max_grad_linf".into(), log.max_grad_linf().into()]);
    if !tail.is_empty() {
        summary.push(vec!["mean_loss_last_window".into(), (tail.iter().sum::<f64>() / tail.len() as f64).into()]);
    }
    let meta = meta_document(
        kind.id(),
        cfg.name(),
        cfg,
        json!({"master_seed": cfg.master_seed, "params_seed": cfg.params.seed}),
        json!({"lambda": lambda, "empirical_constants": {"G_hat": g_hat}, "n": n}),
    );
    Ok(OgdResult {
        log,
        lambda,
        artifact: Artifact {
            experiment: kind.id(),
            name: cfg.name().to_string(),
            raw,
            summary,
            meta,
        },
    })
}
