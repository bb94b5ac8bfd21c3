//! Backward propagation of chaos: OGD on `n`-particle contexts against OGD
//! on `n_ref`-particle contexts, same token stream, same initialization.

use serde_json::json;

use super::config::{ExperimentConfig, ExperimentKind, LambdaSetting, OgdSettings};
use super::output::{meta_document, push_rate_block, rate_summary_table, Artifact, Runner, Table};
use crate::error::{CfmError, Result};
use crate::flow::IntegratorConfig;
use crate::metrics::RateFit;
use crate::params::{path_norm, ParameterPath, PathNorm};
use crate::population::PopulationSpec;
use crate::rng::RngHandle;
use crate::train::{run_paired_ogd_multi, warmup_gradient_bound, OgdConfig, PairStream, TrainLog};

#[derive(Debug, Clone)]
pub struct BackwardPocTrial {
    pub n: usize,
    pub repeat: usize,
    pub deviation: Vec<f64>,
    pub sup_deviation: f64,
    pub uniformity_ratio: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BackwardPocResult {
    pub trials: Vec<BackwardPocTrial>,
    pub lambda: f64,
    pub g_hat: Option<f64>,
    pub fit_sup_deviation: Option<RateFit>,
    pub artifact: Artifact,
}

/// `(lambda, G_hat)`; `G_hat` is only measured for `lambda = "auto"`.
pub fn resolve_lambda(
    ogd: &OgdSettings,
    theta0: &ParameterPath,
    pop: &PopulationSpec,
    n: usize,
    integrator: &IntegratorConfig,
    rng: &RngHandle,
) -> Result<(f64, Option<f64>)> {
    match ogd.lambda {
        LambdaSetting::Value(v) => Ok((v, None)),
        LambdaSetting::Keyword(_) => {
            let stream = PairStream::new(pop.clone(), ogd.target.clone(), ogd.stream, rng.named("warmup"))?;
            let g = warmup_gradient_bound(theta0, pop, &stream, n, ogd.eta, ogd.warmup_steps, integrator, &rng.named("warmup_contexts"))?;
            let lambda = ogd.lambda_factor * g;
            if !(ogd.eta * lambda < 1.0) {
                return Err(CfmError::InvalidArgument(format!(
                    "lambda = {} x G_hat = {lambda} gives eta*lambda >= 1; lower eta",
                    ogd.lambda_factor
                )));
            }
            Ok((lambda, Some(g)))
        }
    }
}

/// With `lambda > 0` both trainers obey `|theta_k| <= max(|theta_0|, G_max / lambda)`
/// and the deviation obeys the one-step envelope; anything else is a bug.
fn check_log(log: &TrainLog, theta0_linf: f64, cfg: &OgdConfig) -> Result<()> {
    let slack = 1e-12;
    if cfg.lambda > 0.0 {
        let g_max = log.records.iter().flat_map(|r| [r.grad_linf, r.grad_ref_linf]).flatten().fold(0.0, f64::max);
        let bound = theta0_linf.max(g_max / cfg.lambda) * (1.0 + slack) + 1e-15;
        for r in &log.records {
            let worst = r.theta_linf.max(r.theta_ref_linf.unwrap_or(0.0));
            if worst > bound {
                return Err(CfmError::BoundViolation(format!("iterate {} has |theta| = {worst:e} > {bound:e}", r.k)));
            }
        }
    }
    for w in log.records.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let (Some(d0), Some(d1), Some(g)) = (a.deviation_linf, b.deviation_linf, a.grad_deviation_linf) else {
            continue;
        };
        let env = cfg.decay() * d0 + cfg.eta * g;
        if d1 > env * (1.0 + slack) + 1e-15 {
            return Err(CfmError::BoundViolation(format!("deviation step {} -> {}: {d1:e} > {env:e}", a.k, b.k)));
        }
    }
    Ok(())
}

pub fn exp_backward_poc(cfg: &ExperimentConfig, runner: &Runner) -> Result<BackwardPocResult> {
    let kind = ExperimentKind::BackwardPoc;
    cfg.validate(kind)?;
    let pop = cfg.population_spec()?;
    let theta0 = cfg.theta()?;
    let ogd = cfg.ogd()?;
    let integrator = ogd.integrator.unwrap_or(cfg.integrator);
    let rng = cfg.master_rng(kind);
    let (lambda, g_hat) = resolve_lambda(ogd, &theta0, &pop, cfg.n_list[0], &integrator, &rng)?;
    let ocfg = OgdConfig {
        eta: ogd.eta,
        lambda,
        iterations: ogd.iterations,
        integrator,
    };
    ocfg.validate()?;
    let theta0_linf = path_norm(&theta0, PathNorm::Linf);
    let per_repeat = runner.map(cfg.repeats, |r| {
        let pairs = PairStream::new(pop.clone(), ogd.target.clone(), ogd.stream, rng.named("pairs").child(r as u64))?.pairs(ogd.iterations)?;
        let logs = run_paired_ogd_multi(&theta0, &pop, &pairs, &cfg.n_list, cfg.n_ref, &ocfg, ogd.coupling, &rng.named("trainer").child(r as u64))?;
        logs.iter().try_for_each(|l| check_log(l, theta0_linf, &ocfg))?;
        Ok(cfg
            .n_list
            .iter()
            .zip(logs)
            .map(|(&n, log)| BackwardPocTrial {
                n,
                repeat: r,
                deviation: log.deviation_series().expect("paired log"),
                sup_deviation: log.sup_deviation().expect("paired log"),
                uniformity_ratio: log.uniformity_ratio(ogd.window_split),
            })
            .collect::<Vec<_>>())
    })?;
    let mut trials: Vec<BackwardPocTrial> = per_repeat.into_iter().flatten().collect();
    trials.sort_by_key(|t| (t.n, t.repeat));

    let mut raw = Table::new(&["n", "repeat", "k", "deviation_linf"]);
    for t in &trials {
        for (k, d) in t.deviation.iter().enumerate() {
            raw.push(vec![t.n.into(), t.repeat.into(), k.into(), (*d).into()]);
        }
    }
    let mut summary = rate_summary_table();
    let sups: Vec<(usize, f64)> = trials.iter().map(|t| (t.n, t.sup_deviation)).collect();
    let (fit_sup_deviation, _) = push_rate_block(&mut summary, "sup_deviation", &sups, cfg.n_ref);
    let ratios: Vec<(usize, f64)> = trials.iter().filter_map(|t| t.uniformity_ratio.map(|u| (t.n, u))).collect();
    if !ratios.is_empty() {
        // ratios are O(1) by design; the fit row is informative only
        push_rate_block(&mut summary, "uniformity_ratio", &ratios, cfg.n_ref);
    }

    let meta = meta_document(
        kind.id(),
        cfg.name(),
        cfg,
        json!({
            "master_seed": cfg.master_seed,
            "params_seed": cfg.params.seed,
            "streams": "repeat r: pairs <- pairs/r, contexts <- trainer/r/{reference,empirical/n}/k",
        }),
        json!({
            "lambda": lambda,
            "lambda_source": if g_hat.is_some() { "auto: lambda_factor x G_hat" } else { "configured" },
            "integrator": integrator,
            "window_split": ogd.window_split,
            "empirical_constants": {
                "G_hat": g_hat,
                "G_hat_source": g_hat.map(|_| format!("max gradient L-inf norm over a {}-step unregularized warm-up at n = {}", ogd.warmup_steps, cfg.n_list[0])),
                "ref_bias": "fitted value of the per-n mean curve at n = n_ref",
            },
            "reference": format!("one n_ref = {} reference trainer per repeat, shared by every n", cfg.n_ref),
        }),
    );
    Ok(BackwardPocResult {
        trials,
        lambda,
        g_hat,
        fit_sup_deviation,
        artifact: Artifact {
            experiment: kind.id(),
            name: cfg.name().to_string(),
            raw,
            summary,
            meta,
        },
    })
}
