use cfmlab::flow::{integrate_forward, output_token, sup_token_deviation, IntegratorConfig};
use cfmlab::linalg::{dist, l2_norm, Mat};
use cfmlab::oracle::expm;
use cfmlab::params::PathNorm;
use cfmlab::population::{sample_ensemble, sample_point, PopulationSpec};
use cfmlab::velocity::eval_velocity;
use cfmlab::{Ensemble, Family, LayerParams, ParameterPath, RngHandle};
use proptest::prelude::*;

fn setup(d: usize, n: usize, seed: u64) -> (Vec<f64>, Ensemble) {
    let spec = PopulationSpec::uniform_ball(d, 1.0);
    let h = RngHandle::new(seed);
    (sample_point(&spec, &h.child(0)).unwrap(), sample_ensemble(&spec, n, &h.child(1)).unwrap())
}

fn zero_query_path(d: usize, layers: usize, v_norm: f64, seed: u64) -> ParameterPath {
    let mut r = RngHandle::new(seed).rng();
    let blocks = (0..layers)
        .map(|_| LayerParams::Attention {
            q: Mat::zeros(d, d),
            k: Mat::random_with_norm(d, d, 1.0, &mut r),
            v: Mat::random_with_norm(d, d, v_norm, &mut r),
        })
        .collect();
    ParameterPath::new(blocks).unwrap()
}

/// Closed form for `Q = 0` on a single layer: the particle mean solves
/// `m' = V m`, and every point moves by `(e^V - I) m(0)`.
fn closed_form(v: &Mat, x0: &[f64], mu0: &Ensemble) -> Vec<f64> {
    let d = x0.len();
    let shift = expm(v).sub(&Mat::identity(d)).mul_vec(&mu0.mean());
    x0.iter().zip(&shift).map(|(a, b)| a + b).collect()
}

fn v_of(layer: &LayerParams) -> &Mat {
    match layer {
        LayerParams::Attention { v, .. } => v,
        _ => unreachable!(),
    }
}

#[test]
fn zero_parameters_freeze_the_state() {
    let (x0, mu0) = setup(3, 5, 1);
    for family in [Family::Attention, Family::Mlp, Family::NearestNeighborDrift] {
        let theta = ParameterPath::zeros(&[family, family], 3).unwrap();
        let traj = integrate_forward(&x0, &mu0, &theta, &IntegratorConfig::rk4(4)).unwrap();
        assert!(traj.x_states.iter().all(|x| *x == x0));
        assert!(traj.particle_states.iter().all(|p| *p == mu0));
        assert_eq!(output_token(&traj), &x0[..]);
    }
}

#[test]
fn initial_state_is_stored_and_grid_is_uniform() {
    let (x0, mu0) = setup(2, 4, 2);
    let theta = ParameterPath::random(&[Family::Attention, Family::Mlp], 2, 1.0, &mut RngHandle::new(3).rng()).unwrap();
    let traj = integrate_forward(&x0, &mu0, &theta, &IntegratorConfig::rk4(3)).unwrap();
    assert_eq!(traj.x_states[0], x0);
    assert_eq!(traj.particle_states[0], mu0);
    assert_eq!(traj.grid.len(), 7);
    assert_eq!(traj.grid[6], 1.0);
    assert_eq!(traj.layer_index, vec![0, 0, 0, 1, 1, 1]);
    assert_eq!(traj.stage_states.len(), 6);
}

#[test]
fn single_euler_step_is_one_velocity_evaluation() {
    let (x0, mu0) = setup(3, 6, 4);
    let theta = ParameterPath::random(&[Family::Attention], 3, 1.0, &mut RngHandle::new(5).rng()).unwrap();
    let traj = integrate_forward(&x0, &mu0, &theta, &IntegratorConfig::euler(1)).unwrap();
    let v = eval_velocity(theta.layer(0), &x0, &mu0).unwrap();
    for c in 0..3 {
        assert!((output_token(&traj)[c] - (x0[c] + v[c])).abs() <= 1e-15);
    }
    assert!(traj.stage_states.is_empty());
}

#[test]
fn zero_query_matches_matrix_exponential() {
    for seed in 0..5 {
        let (x0, mu0) = setup(3, 7, 10 + seed);
        let theta = zero_query_path(3, 1, 1.5, 20 + seed);
        let traj = integrate_forward(&x0, &mu0, &theta, &IntegratorConfig::rk4(64)).unwrap();
        let v = v_of(theta.layer(0));
        assert!(dist(output_token(&traj), &closed_form(v, &x0, &mu0)) <= 1e-6);
        for (z1, z0) in traj.particle_states[64].iter().zip(mu0.iter()) {
            assert!(dist(z1, &closed_form(v, z0, &mu0)) <= 1e-6);
        }
    }
}

fn terminal_error(cfg: IntegratorConfig, seed: u64) -> f64 {
    let (x0, mu0) = setup(3, 5, seed);
    let theta = zero_query_path(3, 1, 1.5, seed + 1);
    let exact = closed_form(v_of(theta.layer(0)), &x0, &mu0);
    let traj = integrate_forward(&x0, &mu0, &theta, &cfg).unwrap();
    dist(output_token(&traj), &exact)
}

#[test]
fn observed_orders() {
    for seed in [30u64, 31, 32] {
        let rk: Vec<f64> = [4, 8, 16].iter().map(|&m| terminal_error(IntegratorConfig::rk4(m), seed)).collect();
        let order = ((rk[0] / rk[2]).log2()) / 2.0;
        assert!(order >= 3.0, "RK4 order {order} ({rk:?})");
        assert!(rk[0] / rk[1] >= 8.0 && rk[1] / rk[2] >= 8.0, "{rk:?}");
        assert!(rk[2] > 1e-12, "error at roundoff floor: {rk:?}");
        let eu: Vec<f64> = [4, 8, 16].iter().map(|&m| terminal_error(IntegratorConfig::euler(m), seed)).collect();
        assert!(eu[0] / eu[1] >= 1.8 && eu[1] / eu[2] >= 1.8, "{eu:?}");
    }
}

#[test]
fn support_stays_in_exponential_ball() {
    let cfg = IntegratorConfig::rk4(8);
    for seed in 0..20u64 {
        let (x0, mu0) = setup(3, 12, 100 + seed);
        let theta = ParameterPath::random(&[Family::Attention; 2], 3, 1.0 / 3f64.sqrt(), &mut RngHandle::new(seed).rng()).unwrap();
        let m = theta.norm(PathNorm::Linf);
        let traj = integrate_forward(&x0, &mu0, &theta, &cfg).unwrap();
        let h = traj.step_size();
        let bound = m.exp() * 1.0 * (1.0 + 10.0 * h);
        assert!(traj.max_particle_norms().iter().all(|&r| r <= bound));
    }
}

#[test]
fn deterministic_and_permutation_equivariant() {
    let (x0, mu0) = setup(4, 9, 7);
    let theta = ParameterPath::random(&[Family::Attention, Family::Mlp], 4, 0.8, &mut RngHandle::new(8).rng()).unwrap();
    let cfg = IntegratorConfig::rk4(4);
    let a = integrate_forward(&x0, &mu0, &theta, &cfg).unwrap();
    let b = integrate_forward(&x0, &mu0, &theta, &cfg).unwrap();
    assert_eq!(a.x_states, b.x_states);
    assert_eq!(a.particle_states, b.particle_states);

    let perm = [4, 2, 7, 0, 8, 1, 3, 6, 5];
    let p = integrate_forward(&x0, &mu0.permuted(&perm).unwrap(), &theta, &cfg).unwrap();
    assert!(sup_token_deviation(&a, &p).unwrap() <= 1e-13);
    for (ens_a, ens_p) in a.particle_states.iter().zip(&p.particle_states) {
        for (j, &src) in perm.iter().enumerate() {
            assert!(dist(ens_p.particle(j), ens_a.particle(src)) <= 1e-13);
        }
    }
}

#[test]
fn trajectory_csv_layout() {
    let (x0, mu0) = setup(2, 2, 9);
    let theta = ParameterPath::zeros(&[Family::Mlp], 2).unwrap();
    let traj = integrate_forward(&x0, &mu0, &theta, &IntegratorConfig::euler(2)).unwrap();
    let mut buf = Vec::new();
    traj.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.split("\r\n").filter(|l| !l.is_empty()).collect();
    assert_eq!(lines[0], "step,s,kind,particle_index,coord_0,coord_1");
    assert_eq!(lines.len(), 1 + 3 * 3);
    assert!(lines[1].starts_with("0,0.0000000000000000e0,token,,"));
    let last_token: Vec<f64> = lines[7].split(',').skip(4).map(|v| v.parse().unwrap()).collect();
    assert_eq!(last_token, x0);
}

#[test]
fn dimension_errors() {
    let (x0, mu0) = setup(3, 4, 11);
    let theta = ParameterPath::zeros(&[Family::Attention], 2).unwrap();
    assert!(integrate_forward(&x0, &mu0, &theta, &IntegratorConfig::rk4(2)).is_err());
    let theta = ParameterPath::zeros(&[Family::Attention], 3).unwrap();
    assert!(integrate_forward(&x0, &mu0, &theta, &IntegratorConfig::rk4(0)).is_err());
}

#[test]
fn blow_up_is_reported_with_step_and_layer() {
    let d = 2;
    let big = Mat::scaled_identity(d, 1e200);
    let theta = ParameterPath::new(vec![
        LayerParams::zeros(Family::Mlp, d),
        LayerParams::NearestNeighborDrift { a: big },
    ])
    .unwrap();
    let x0 = vec![1.0, 0.0];
    let mu0 = Ensemble::from_points(&[vec![-1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    match integrate_forward(&x0, &mu0, &theta, &IntegratorConfig::euler(3)) {
        Err(cfmlab::CfmError::NonFiniteState { layer, step }) => {
            assert_eq!(layer, 1);
            assert!(step >= 3);
        }
        other => panic!("expected non-finite state, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn token_norm_growth_is_bounded(seed in 0u64..10_000, scale in 0.1f64..1.5) {
        let (x0, mu0) = setup(3, 6, seed);
        let theta = ParameterPath::random(&[Family::Attention], 3, scale, &mut RngHandle::new(seed ^ 0xabc).rng()).unwrap();
        let traj = integrate_forward(&x0, &mu0, &theta, &IntegratorConfig::rk4(8)).unwrap();
        // |x_1| <= |x_0| + |V| max|z_s| <= |x_0| + M e^M
        let m = theta.norm(PathNorm::Linf);
        prop_assert!(l2_norm(output_token(&traj)) <= l2_norm(&x0) + m * m.exp() * (1.0 + 10.0 / 8.0) + 1e-12);
    }
}

/// Largest `|D_x V|_op + |grad_W V|_op` seen along a trajectory, over the token and every particle.
fn lipschitz_along(traj: &cfmlab::flow::Trajectory, theta: &ParameterPath) -> f64 {
    use cfmlab::velocity::{jac_x, wasserstein_jac};
    let mut jx: f64 = 0.0;
    let mut wj: f64 = 0.0;
    for k in 0..traj.num_steps() {
        let layer = theta.layer(traj.layer_index[k]);
        let mu = &traj.particle_states[k];
        let queries: Vec<&[f64]> = std::iter::once(traj.x_states[k].as_slice()).chain(mu.iter()).collect();
        for q in &queries {
            jx = jx.max(jac_x(layer, q, mu).unwrap().op_norm());
            for z in mu.iter() {
                wj = wj.max(wasserstein_jac(layer, q, mu, z).unwrap().op_norm());
            }
        }
    }
    jx + wj
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn deviation_obeys_the_stability_envelope(seed in 0u64..10_000, shift in 0.0f64..0.3) {
        let d = 2;
        let mut r = RngHandle::new(77).rng();
        let theta = ParameterPath::random(&[Family::Attention, Family::Attention], d, 1.0, &mut r).unwrap();
        let (x0, mu0) = setup(d, 5, seed);
        let (y0, nu0) = setup(d, 5, seed + 20_000);
        // pull the second pair towards the first so both near and far pairs occur
        let mix = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p + shift * (q - p)).collect::<Vec<f64>>();
        let xt = mix(&x0, &y0);
        let mut nu = Vec::new();
        for (a, b) in mu0.iter().zip(nu0.iter()) {
            nu.extend(mix(a, b));
        }
        let nu = Ensemble::new(d, nu).unwrap();
        let cfg = IntegratorConfig::rk4(8);
        let a = integrate_forward(&x0, &mu0, &theta, &cfg).unwrap();
        let b = integrate_forward(&xt, &nu, &theta, &cfg).unwrap();
        let lhat = lipschitz_along(&a, &theta).max(lipschitz_along(&b, &theta));
        let initial = cfmlab::metrics::w1(&mu0, &nu).unwrap() + dist(&x0, &xt);
        let dev = sup_token_deviation(&a, &b).unwrap();
        prop_assert!(dev <= (3.0 * lhat).exp() * initial * (1.0 + 1e-9) + 1e-14, "dev {} > exp(3 * {}) * {}", dev, lhat, initial);
    }
}
