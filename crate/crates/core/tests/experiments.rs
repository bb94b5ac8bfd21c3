use cfmlab::experiments::audit::{audit_bounds, Bound};
use cfmlab::experiments::config::ScheduleKind;
use cfmlab::experiments::grad_check::{tolerance, Cell};
use cfmlab::experiments::output::{stats_from_raw, Stats};
use cfmlab::experiments::stability::{Axis, Output};
use cfmlab::experiments::{
    exp_backward_poc, exp_forward_poc, exp_grad_check, exp_stability, exp_support_growth, run_experiment, ExperimentConfig, ExperimentKind,
    Runner,
};
use cfmlab::metrics::fit_rate;

fn cfg(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(text).unwrap()
}

fn runner() -> Runner {
    Runner::new(1).unwrap()
}

const POC: &str = r#"
dim = 2
n_list = [4, 8, 16]
n_ref = 64
repeats = 8
[params]
schedule = ["attention", "attention"]
seed = 2
[integrator]
scheme = "rk4"
substeps_per_layer = 2
"#;

#[test]
fn config_errors_are_reported() {
    let base = "dim = 2\n[params]\nschedule = [\"attention\"]\n";
    assert!(ExperimentConfig::from_toml(&format!("{base}unknown = 3\n")).is_err());
    assert!(ExperimentConfig::from_toml(&format!("bogus = 1\n{base}")).is_err());
    let decreasing = cfg(&format!("n_list = [8, 4, 16]\n{base}"));
    assert!(decreasing.validate(ExperimentKind::ForwardPoc).is_err());
    let few = cfg(&format!("n_list = [4, 8, 16]\nn_ref = 64\nrepeats = 4\n{base}"));
    assert!(few.validate(ExperimentKind::ForwardPoc).unwrap_err().to_string().contains("repeats"));
    let wrong = cfg(&format!("experiment = \"ogd\"\n{base}"));
    assert!(wrong.validate(ExperimentKind::Forward).is_err());
    let mut ogd = cfg(POC);
    ogd.ogd = Some(toml_ogd("iterations = 3"));
    assert!(ogd.validate(ExperimentKind::BackwardPoc).unwrap_err().to_string().contains("8 *"));
    let mut audit = cfg(base);
    audit.audit.samples = 100;
    assert!(audit.validate(ExperimentKind::LipschitzAudit).is_err());
    let mut support = cfg(base);
    support.params.schedule.push(cfmlab::params::Family::Mlp);
    assert!(support.validate(ExperimentKind::SupportGrowth).is_err());
}

fn toml_ogd(text: &str) -> cfmlab::experiments::config::OgdSettings {
    toml::from_str(text).unwrap()
}

#[test]
fn forward_poc_with_shared_context_at_full_size_has_no_deviation() {
    let mut c = cfg(POC);
    c.n_list = vec![4, 16, 64];
    c.forward.coupling = cfmlab::train::Coupling::Shared;
    let r = exp_forward_poc(&c, &runner()).unwrap();
    for row in r.rows.iter().filter(|r| r.n == 64) {
        assert_eq!(row.sup_dev_x, 0.0);
        assert_eq!(row.w1_initial, 0.0);
        assert_eq!(row.sup_w1, Some(0.0));
    }
    assert!(r.rows.iter().filter(|r| r.n == 4).all(|r| r.sup_dev_x > 0.0));
}

fn summary_value(t: &cfmlab::experiments::Table, metric: &str, n: usize, col: &str) -> f64 {
    let (mc, nc, vc) = (t.column("metric").unwrap(), t.column("n").unwrap(), t.column(col).unwrap());
    let row = t
        .rows
        .iter()
        .find(|r| r[mc] == metric.into() && r[nc] == n.into() && r[t.column("kind").unwrap()] == "stats".into())
        .unwrap();
    match row[vc] {
        cfmlab::experiments::output::Cell::Real(v) => v,
        ref other => panic!("{other:?}"),
    }
}

#[test]
fn forward_poc_summary_is_recomputable_from_raw_rows() {
    let r = exp_forward_poc(&cfg(POC), &runner()).unwrap();
    let a = &r.artifact;
    let per_n = stats_from_raw(&a.raw, "sup_dev_x");
    assert_eq!(per_n.len(), 3);
    for (n, s) in &per_n {
        assert_eq!(s.count, 8);
        assert_eq!(summary_value(&a.summary, "sup_dev_x", *n, "mean"), s.mean);
        assert_eq!(summary_value(&a.summary, "sup_dev_x", *n, "q90"), s.q90);
    }
    let fit = fit_rate(&per_n.iter().map(|(n, s)| (*n, s.mean)).collect::<Vec<_>>()).unwrap();
    assert_eq!(fit.slope, r.fit_dev_x.unwrap().slope);
    let direct: Vec<f64> = r.rows.iter().filter(|x| x.n == 8).map(|x| x.sup_dev_x).collect();
    assert_eq!(Stats::of(&direct).mean, per_n[1].1.mean);
}

#[test]
fn backward_poc_with_shared_contexts_at_full_size_has_no_deviation() {
    let mut c = cfg(&POC.replace("n_ref = 64", "n_ref = 16").replace("[\"attention\", \"attention\"]", "[\"attention\"]"));
    let mut ogd = toml_ogd("iterations = 12\nlambda = 0.5\ncoupling = \"shared\"\nwindow_split = 4");
    ogd.integrator = Some(cfmlab::flow::IntegratorConfig::euler(1));
    c.ogd = Some(ogd);
    let r = exp_backward_poc(&c, &runner()).unwrap();
    assert_eq!(r.lambda, 0.5);
    assert_eq!(r.trials.len(), 24);
    for t in &r.trials {
        assert_eq!(t.deviation.len(), 13);
        if t.n == 16 {
            assert_eq!(t.sup_deviation, 0.0);
        } else {
            assert!(t.sup_deviation > 0.0);
        }
    }
}

#[test]
fn backward_poc_auto_lambda_is_factor_times_warmup_bound() {
    let mut c = cfg(&POC.replace("n_ref = 64", "n_ref = 128").replace("[\"attention\", \"attention\"]", "[\"attention\"]"));
    let mut ogd = toml_ogd("iterations = 6\nlambda = \"auto\"\nlambda_factor = 3\nwarmup_steps = 4\nwindow_split = 2");
    ogd.integrator = Some(cfmlab::flow::IntegratorConfig::euler(1));
    c.ogd = Some(ogd);
    let r = exp_backward_poc(&c, &runner()).unwrap();
    let g = r.g_hat.unwrap();
    assert!(g > 0.0);
    assert!((r.lambda - 3.0 * g).abs() < 1e-15);
}

const STABILITY: &str = r#"
dim = 2
n_list = [6]
[params]
schedule = ["attention", "mlp"]
seed = 4
[integrator]
scheme = "rk4"
substeps_per_layer = 4
[stability]
instances = 2
rungs = 4
base_delta = 0.01
"#;

#[test]
fn zero_perturbation_moves_nothing() {
    let mut c = cfg(STABILITY);
    c.stability.base_delta = 0.0;
    let r = exp_stability(&c, &runner()).unwrap();
    assert!(r.rows.iter().all(|x| x.output_delta == 0.0 && x.ratio() == 0.0));
    assert!(r.summaries.iter().all(|s| s.halving.is_none()));
}

#[test]
fn halving_the_input_roughly_halves_the_output() {
    let r = exp_stability(&cfg(STABILITY), &runner()).unwrap();
    for s in &r.summaries {
        if (s.axis, s.output) == (Axis::Token, Output::SupW1) {
            // the context does not see the token
            assert_eq!(s.max_ratio, 0.0);
            continue;
        }
        let (lo, hi) = s.halving.unwrap_or_else(|| panic!("{:?}/{:?} never moved", s.axis, s.output));
        assert!(lo >= 0.3 && hi <= 0.7, "{:?}/{:?}: {lo} {hi}", s.axis, s.output);
    }
    let theta = r.summaries.iter().find(|s| s.axis == Axis::Theta && s.output == Output::SupToken).unwrap();
    assert!(theta.max_ratio > 0.0);
    for (axis, drift) in &r.amplification_drift {
        assert!((0.5..=2.0).contains(drift), "{axis:?}: {drift}");
    }
    assert_eq!(r.artifact.raw.rows.len(), 2 * 3 * 4 * 3);
}

const AUDIT: &str = r#"
dim = 2
[params]
schedule = ["attention", "attention"]
[integrator]
scheme = "rk4"
substeps_per_layer = 8
[audit]
samples = 10000
max_particles = 5
flow_instances = 6
gradient_instances = 3
"#;

#[test]
fn audit_holds_and_scales_with_the_norm_bound() {
    let r = audit_bounds(&cfg(AUDIT), &runner()).unwrap();
    assert_eq!(r.ledger.total_violations(), 0);
    let spatial = r.ledger.entry(Bound::AttentionSpatial);
    assert_eq!(spatial.samples, 10000);
    // at M = R = 1 the spatial bound is 4
    assert!(spatial.max_observed <= 4.0);
    assert!(r.ledger.entry(Bound::KernelIdentity).max_observed <= 1e-12);

    let mut zero = cfg(AUDIT);
    zero.audit.m_bound = 0.0;
    assert!(audit_bounds(&zero, &runner()).is_err());

    // the spatial attention bound is cubic in M
    let mut small = cfg(AUDIT);
    small.audit.m_bound = 0.1;
    let s = audit_bounds(&small, &runner()).unwrap();
    assert_eq!(s.ledger.total_violations(), 0);
    assert!(s.ledger.entry(Bound::AttentionSpatial).max_observed <= 4e-3);
}

const SUPPORT: &str = r#"
dim = 2
n_list = [8]
[params]
schedule = ["attention", "attention"]
init_scale = 1.5
[integrator]
scheme = "rk4"
substeps_per_layer = 8
[support]
instances = 6
"#;

#[test]
fn support_growth_stays_under_its_bound() {
    let mut overshoots = Vec::new();
    for m in [8, 16, 32] {
        let mut c = cfg(SUPPORT);
        c.integrator.substeps_per_layer = m;
        let r = exp_support_growth(&c, &runner()).unwrap();
        assert_eq!(r.violations, 0);
        for row in &r.rows {
            assert!(row.max_particle_norm <= row.bound * (1.0 + 10.0 / (2.0 * m as f64)));
        }
        overshoots.push(r.overshoot);
    }
    assert!(overshoots.windows(2).all(|w| w[1] <= w[0]), "{overshoots:?}");
}

#[test]
fn zero_parameters_keep_the_support_fixed() {
    let mut c = cfg(SUPPORT);
    c.params.init_scale = 0.0;
    let r = exp_support_growth(&c, &runner()).unwrap();
    for i in 0..6 {
        let rows: Vec<_> = r.rows.iter().filter(|x| x.instance == i).collect();
        assert!(rows.iter().all(|x| x.max_particle_norm == rows[0].max_particle_norm));
        assert!(rows.iter().all(|x| x.bound == rows[0].bound));
    }
}

#[test]
fn grad_check_tolerances_by_cell() {
    let cell = |schedule, n| Cell { schedule, layers: 2, dim: 3, n };
    assert_eq!(tolerance(&cell(ScheduleKind::Mlp, 8)), 1e-5);
    assert_eq!(tolerance(&cell(ScheduleKind::Attention, 1)), 1e-4);
    assert_eq!(tolerance(&cell(ScheduleKind::Attention, 8)), 1e-3);
    assert_eq!(tolerance(&cell(ScheduleKind::Mixed, 1)), 1e-3);
}

#[test]
fn small_grad_check_sweep_passes() {
    let c = cfg(r#"
dim = 2
[params]
schedule = ["attention"]
[integrator]
scheme = "rk4"
substeps_per_layer = 8
[grad_check]
schedules = ["attention", "mlp", "mixed"]
layers = [1, 2]
contexts = [1, 4]
dims = [2]
directions = 2
"#);
    let r = exp_grad_check(&c, &runner()).unwrap();
    assert_eq!(r.rows.len(), 12);
    for row in &r.rows {
        assert!(row.passed(), "{:?}: {}", row.cell, row.report.max_rel_error);
    }
}

#[test]
fn artifacts_are_identical_across_thread_counts() {
    let c = cfg(POC);
    let one = run_experiment(ExperimentKind::ForwardPoc, &c, &Runner::new(1).unwrap()).unwrap();
    let four = run_experiment(ExperimentKind::ForwardPoc, &c, &Runner::new(4).unwrap()).unwrap();
    assert_eq!(one.raw.to_csv_bytes(), four.raw.to_csv_bytes());
    assert_eq!(one.summary.to_csv_bytes(), four.summary.to_csv_bytes());
    assert_eq!(one.meta, four.meta);

    let dir = tempfile::tempdir().unwrap();
    let paths = one.write(dir.path()).unwrap();
    assert_eq!(paths.len(), 3);
    let names: Vec<String> = paths.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["default.raw.csv", "default.summary.csv", "default.meta.json"]);
    assert!(paths[0].starts_with(dir.path().join("forward_poc")));
    assert_eq!(std::fs::read(&paths[0]).unwrap(), one.raw.to_csv_bytes());
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(&paths[2]).unwrap()).unwrap();
    assert_eq!(meta["experiment"], "forward_poc");
    assert_eq!(meta["config"]["n_ref"], 64);
    assert!(meta["config"].get("output").is_none());
    // no stray temporaries
    assert_eq!(std::fs::read_dir(dir.path().join("forward_poc")).unwrap().count(), 3);
}
