use cfmlab::flow::IntegratorConfig;
use cfmlab::linalg::Mat;
use cfmlab::params::{path_norm, PathNorm};
use cfmlab::population::{Context, PopulationSpec};
use cfmlab::train::{
    run_ogd, run_paired_ogd, run_paired_ogd_multi, warmup_gradient_bound, Coupling, OgdConfig, PairStream, StreamMode, Target,
};
use cfmlab::{CfmError, Family, LayerParams, ParameterPath, RngHandle};
use proptest::prelude::*;

fn stream(d: usize, target: Target, seed: u64) -> PairStream {
    PairStream::new(PopulationSpec::uniform_ball(d, 1.0), target, StreamMode::Iid, RngHandle::new(seed)).unwrap()
}

fn cfg(eta: f64, lambda: f64, iterations: usize) -> OgdConfig {
    OgdConfig {
        eta,
        lambda,
        iterations,
        integrator: IntegratorConfig::rk4(2),
    }
}

/// Attention path with `V = 0`: the velocity vanishes, so identity targets
/// give a zero adjoint and a zero gradient whatever `Q` and `K` are.
fn silent_path(d: usize, seed: u64) -> ParameterPath {
    let mut r = RngHandle::new(seed).rng();
    ParameterPath::new(vec![LayerParams::Attention {
        q: Mat::random_with_norm(d, d, 1.3, &mut r),
        k: Mat::random_with_norm(d, d, 0.7, &mut r),
        v: Mat::zeros(d, d),
    }])
    .unwrap()
}

#[test]
fn zero_iterations_log_only_initialization() {
    let theta = ParameterPath::random(&[Family::Mlp], 2, 1.0, &mut RngHandle::new(1).rng()).unwrap();
    let log = run_ogd(&theta, &[], 4, &cfg(0.1, 0.0, 0), &RngHandle::new(2)).unwrap();
    assert_eq!(log.records.len(), 1);
    assert_eq!(log.final_theta, theta);
    assert_eq!(log.records[0].loss_emp, None);
}

#[test]
fn zero_gradient_stream_decays_geometrically() {
    let d = 3;
    let theta0 = silent_path(d, 3);
    let pop = PopulationSpec::uniform_ball(d, 1.0);
    let samples = stream(d, Target::Identity, 4).samples(25, &Context::Population(pop)).unwrap();
    let c = cfg(0.2, 1.5, 25);
    let log = run_ogd(&theta0, &samples, 6, &c, &RngHandle::new(5)).unwrap();
    let n0 = path_norm(&theta0, PathNorm::Linf);
    for r in &log.records {
        let expected = c.decay().powi(r.k as i32) * n0;
        assert!((r.theta_linf - expected).abs() <= 1e-13 * n0, "k={}", r.k);
        assert!(r.grad_linf.map_or(true, |g| g == 0.0));
    }
}

#[test]
fn large_ridge_keeps_parameters_bounded() {
    let d = 2;
    let pop = PopulationSpec::uniform_ball(d, 1.0);
    let s = stream(d, Target::Scaled { factor: -1.0 }, 6);
    let schedule = [Family::Attention, Family::Mlp];
    let theta0 = ParameterPath::zeros(&schedule, d).unwrap();
    let integ = IntegratorConfig::rk4(2);
    let g_hat = warmup_gradient_bound(&theta0, &pop, &s, 8, 0.05, 20, &integ, &RngHandle::new(7)).unwrap();
    assert!(g_hat > 0.0);
    let c = OgdConfig {
        eta: 0.05,
        lambda: 2.0 * g_hat,
        iterations: 80,
        integrator: integ,
    };
    let samples = s.samples(80, &Context::Population(pop)).unwrap();
    let log = run_ogd(&theta0, &samples, 8, &c, &RngHandle::new(8)).unwrap();
    // |theta_{k+1}| <= (1 - eta lambda)|theta_k| + eta |G_k|, so zero init stays below G/lambda
    let bound = log.max_grad_linf() / c.lambda;
    assert!(log.records.iter().all(|r| r.theta_linf <= bound * (1.0 + 1e-12)));
    assert!(log.records.last().unwrap().theta_linf > 0.0);
}

#[test]
fn fixed_cycle_stream_trains_on_repeated_samples() {
    let d = 2;
    let s = PairStream::new(
        PopulationSpec::uniform_ball(d, 1.0),
        Target::Scaled { factor: 0.5 },
        StreamMode::FixedCycle { period: 4 },
        RngHandle::new(9),
    )
    .unwrap();
    let ctx = Context::Explicit(cfmlab::population::sample_ensemble(&PopulationSpec::uniform_ball(d, 1.0), 5, &RngHandle::new(10)).unwrap());
    let samples = s.samples(40, &ctx).unwrap();
    let theta0 = ParameterPath::random(&[Family::Mlp], d, 0.3, &mut RngHandle::new(11).rng()).unwrap();
    let log = run_ogd(&theta0, &samples, 5, &cfg(0.2, 0.0, 40), &RngHandle::new(12)).unwrap();
    let first: f64 = log.records[..4].iter().map(|r| r.loss_emp.unwrap()).sum();
    let last: f64 = log.records[36..40].iter().map(|r| r.loss_emp.unwrap()).sum();
    assert!(last < first, "{first} -> {last}");
}

fn paired(n: usize, n_ref: usize, lambda: f64, k: usize, coupling: Coupling, seed: u64) -> cfmlab::train::TrainLog {
    let d = 2;
    let pop = PopulationSpec::uniform_ball(d, 1.0);
    let pairs = stream(d, Target::Scaled { factor: -1.0 }, seed).pairs(k).unwrap();
    let theta0 = ParameterPath::zeros(&[Family::Attention], d).unwrap();
    run_paired_ogd(&theta0, &pop, &pairs, n, n_ref, &cfg(0.05, lambda, k), coupling, &RngHandle::new(seed + 1)).unwrap()
}

#[test]
fn shared_contexts_of_equal_size_never_deviate() {
    let log = paired(16, 16, 1.0, 30, Coupling::Shared, 20);
    assert!(log.records.iter().all(|r| r.deviation_linf == Some(0.0)));
    assert_eq!(log.final_theta_ref.as_ref(), Some(&log.final_theta));
}

#[test]
fn paired_runs_are_reproducible_and_respect_the_step_envelope() {
    let (lambda, eta) = (2.0, 0.05);
    let a = paired(4, 32, lambda, 40, Coupling::Independent, 30);
    let b = paired(4, 32, lambda, 40, Coupling::Independent, 30);
    assert_eq!(a.deviation_series(), b.deviation_series());
    assert_eq!(a.records, b.records);
    let dev = a.deviation_series().unwrap();
    assert_eq!(dev[0], 0.0);
    assert!(dev[40] > 0.0);
    // |D_{k+1}| <= (1 - eta lambda)|D_k| + eta |G_k - G_hat_k| <= |D_k| + eta max |G - G_hat|
    for k in 0..40 {
        let g = a.records[k].grad_deviation_linf.unwrap();
        assert!(dev[k + 1] <= (1.0 - eta * lambda) * dev[k] + eta * g + 1e-14);
        assert!(dev[k + 1] <= dev[k] + eta * a.max_grad_deviation() + 1e-14);
    }
}

#[test]
fn multi_size_driver_matches_separate_runs() {
    let d = 2;
    let pop = PopulationSpec::uniform_ball(d, 1.0);
    let pairs = stream(d, Target::Scaled { factor: -1.0 }, 70).pairs(12).unwrap();
    let theta0 = ParameterPath::zeros(&[Family::Attention], d).unwrap();
    let c = cfg(0.05, 1.0, 12);
    let r = RngHandle::new(71);
    let logs = run_paired_ogd_multi(&theta0, &pop, &pairs, &[2, 4], 32, &c, Coupling::Independent, &r).unwrap();
    for (i, n) in [2, 4].into_iter().enumerate() {
        let single = run_paired_ogd(&theta0, &pop, &pairs, n, 32, &c, Coupling::Independent, &r).unwrap();
        assert_eq!(logs[i].records, single.records);
    }
    assert_ne!(logs[0].records, logs[1].records);
}

#[test]
fn unregularized_finite_horizon_deviation_is_recorded() {
    let k = (1.0f64 / 0.05).ceil() as usize;
    let log = paired(4, 32, 0.0, k, Coupling::Independent, 40);
    let dev = log.records[k].deviation_linf.unwrap();
    assert!(dev.is_finite() && dev > 0.0);
}

#[test]
fn csv_has_one_row_per_iterate() {
    let log = paired(2, 16, 1.0, 3, Coupling::Independent, 50);
    let mut buf = Vec::new();
    log.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.split("\r\n").filter(|l| !l.is_empty()).collect();
    assert_eq!(lines[0], "k,loss_pop,loss_emp,theta_linf,grad_linf,deviation_linf");
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("3,,,"));
    assert_eq!(lines[1].split(',').count(), 6);
}

#[test]
fn argument_and_iteration_errors() {
    let d = 2;
    let pop = PopulationSpec::uniform_ball(d, 1.0);
    let pairs = stream(d, Target::Identity, 60).pairs(3).unwrap();
    let theta0 = ParameterPath::zeros(&[Family::Attention], d).unwrap();
    let c = cfg(0.1, 0.0, 3);
    let r = RngHandle::new(61);
    assert!(matches!(
        run_paired_ogd(&theta0, &pop, &pairs, 8, 32, &c, Coupling::Independent, &r),
        Err(CfmError::InvalidArgument(_))
    ));
    assert!(run_paired_ogd(&theta0, &pop, &pairs[..2], 2, 16, &c, Coupling::Independent, &r).is_err());

    let drift = ParameterPath::zeros(&[Family::NearestNeighborDrift], d).unwrap();
    let samples = stream(d, Target::Identity, 62).samples(3, &Context::Population(pop)).unwrap();
    match run_ogd(&drift, &samples, 4, &c, &r) {
        Err(CfmError::Training { iteration: 0, source }) => {
            assert!(matches!(*source, CfmError::UnsupportedFamily { .. }))
        }
        other => panic!("{other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn ridge_only_decay(eta in 0.01f64..0.5, frac in 0.0f64..0.99, seed in 0u64..1000) {
        let d = 2;
        let lambda = frac / eta;
        let theta0 = silent_path(d, seed);
        let samples = stream(d, Target::Identity, seed).samples(6, &Context::Population(PopulationSpec::uniform_ball(d, 1.0))).unwrap();
        let c = cfg(eta, lambda, 6);
        let log = run_ogd(&theta0, &samples, 3, &c, &RngHandle::new(seed)).unwrap();
        let n0 = path_norm(&theta0, PathNorm::Linf);
        for r in &log.records {
            prop_assert!((r.theta_linf - c.decay().powi(r.k as i32) * n0).abs() <= 1e-13 * n0);
        }
    }
}
