//! Property suites over randomized networks, injections and controller
//! states.

use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voltlab_core::{
    build_sensitivities, controllers::{
        droop_update, dual_update, inner_projection_step, max_inner_step_size,
        x_norm_projection_oracle, ControllerConfig, DroopCurve, DualState, InnerState,
        SetpointBox,
    },
    generate_profiles, generate_synthetic_feeder, grid::path_cables, linear_voltage, load_network,
    load_profiles, save_network, save_profiles, solve_ac, Branching, BusId, PowerInjection,
    ProfileUnits, RadialNetwork, VoltageProfile,
};

fn branching(tag: u8) -> Branching {
    match tag % 3 {
        0 => Branching::Chain,
        1 => Branching::ChainHeavy,
        _ => Branching::Random,
    }
}

fn feeder(seed: u64, total_buses: usize, tag: u8) -> RadialNetwork {
    generate_synthetic_feeder(seed, total_buses, branching(tag)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// X equals the independently computed common-path reactance sums, is
    /// symmetric positive definite, and X^-1 follows electrical adjacency.
    #[test]
    fn sensitivities_path_sums_spd_sparsity(seed in 0u64..10_000, n in 2usize..30, tag: u8) {
        let net = feeder(seed, n + 1, tag);
        let sens = build_sensitivities(&net).unwrap();
        let m = sens.n();

        for i in 0..m {
            for j in 0..m {
                let shared: f64 = {
                    let pi = path_cables(&net, BusId(i + 1)).unwrap();
                    let pj = path_cables(&net, BusId(j + 1)).unwrap();
                    pi.iter()
                        .filter(|c| pj.iter().any(|d| (d.from, d.to) == (c.from, c.to)))
                        .map(|c| c.reactance)
                        .sum()
                };
                prop_assert!((sens.x[(i, j)] - shared).abs() <= 1e-12 * shared.max(1.0));
                prop_assert!((sens.x[(i, j)] - sens.x[(j, i)]).abs() <= 1e-15);
            }
        }
        prop_assert!(sens.lambda_min_x() > 0.0);

        let max_abs = sens.x_inv.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        for i in 0..m {
            for j in 0..m {
                if !sens.is_adjacent(i, j) {
                    prop_assert!(sens.x_inv[(i, j)].abs() <= 1e-9 * max_abs);
                }
            }
        }
    }

    /// Off-diagonal sensitivities never exceed the diagonal: a bus is most
    /// sensitive to its own injection.
    #[test]
    fn diagonal_dominates(seed in 0u64..10_000, n in 2usize..40, tag: u8) {
        let net = feeder(seed, n + 1, tag);
        let sens = build_sensitivities(&net).unwrap();
        for i in 0..sens.n() {
            for j in 0..sens.n() {
                prop_assert!(sens.x[(i, j)] >= 0.0);
                prop_assert!(sens.x[(i, j)] <= sens.x[(i, i)] + 1e-15);
                prop_assert!(sens.x[(i, j)] <= sens.x[(j, j)] + 1e-15);
            }
        }
    }

    /// Dual iterates remain componentwise nonnegative from any nonnegative
    /// start under any measured voltages.
    #[test]
    fn duals_stay_nonnegative(
        lambda0 in proptest::collection::vec(0.0f64..50.0, 1..12),
        v in proptest::collection::vec(0.8f64..1.2, 1..12),
        alpha_d in 0.1f64..1000.0,
        r_d in 0.0f64..1e-2,
    ) {
        let n = lambda0.len().min(v.len());
        let cfg = ControllerConfig { alpha_d, r_d, ..ControllerConfig::default() };
        let mut duals = DualState {
            lambda: DVector::from_iterator(n, lambda0.iter().take(n).cloned()),
            mu: DVector::from_iterator(n, lambda0.iter().take(n).map(|x| x * 0.5)),
        };
        let meas = VoltageProfile { v: DVector::from_iterator(n, v.iter().take(n).cloned()) };
        for _ in 0..20 {
            duals = dual_update(&duals, &meas, &cfg);
            prop_assert!(duals.lambda.iter().all(|x| *x >= 0.0));
            prop_assert!(duals.mu.iter().all(|x| *x >= 0.0));
        }
    }

    /// The linearized voltage model tracks the AC plant within 0.01 pu for
    /// injections inside the feeder's rated envelope.
    #[test]
    fn linear_model_fidelity(seed in 0u64..10_000, n in 2usize..20, tag: u8, load in 0.0f64..1.0) {
        let net = feeder(seed, n + 1, tag);
        let sens = build_sensitivities(&net).unwrap();
        let m = net.n();
        let caps = net.pv_capacity();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let p_gen = DVector::from_iterator(m, (0..m).map(|i| caps[i] * rng.gen_range(0.0..1.0)));
        let p_dem = DVector::from_iterator(m, (0..m).map(|i| caps[i] * load * 0.3));
        let q_dem = 0.3 * &p_dem;
        let (q_lo, q_hi) = net.q_limits();
        let q = DVector::from_iterator(m, (0..m).map(|i| rng.gen_range(q_lo[i]..=q_hi[i])));

        let v_lin = linear_voltage(&sens, &net, &q, &p_gen, &p_dem, &q_dem).unwrap();
        let inj = PowerInjection::net(&q, &p_gen, &p_dem, &q_dem);
        let v_ac = solve_ac(&net, &inj, 1e-12, 300).unwrap().voltages.v;
        prop_assert!((v_lin.v - v_ac).amax() <= 0.01);
    }

    /// The local inner loop on the linear plant lands on the X-norm
    /// projection, not the Euclidean one.
    #[test]
    fn inner_loop_is_x_norm_projection(seed in 0u64..10_000, n in 2usize..9) {
        let net = feeder(seed, n + 1, 2);
        let sens = build_sensitivities(&net).unwrap();
        let m = sens.n();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bounds = SetpointBox {
            lower: DVector::from_iterator(m, (0..m).map(|_| rng.gen_range(-0.5..-0.05))),
            upper: DVector::from_iterator(m, (0..m).map(|_| rng.gen_range(0.05..0.5))),
        };
        let q_dot = DVector::from_iterator(m, (0..m).map(|_| rng.gen_range(-1.5..1.5)));
        let cfg = ControllerConfig {
            alpha_u: 0.9 * max_inner_step_size(&sens),
            ..ControllerConfig::default()
        };
        let mut inner = InnerState { u: DVector::zeros(m), v_target: &sens.x * &q_dot, tau: 0 };
        for _ in 0..500 {
            let v_at_u = VoltageProfile { v: &sens.x * &inner.u };
            inner = inner_projection_step(&inner, &v_at_u, &cfg, &bounds);
        }
        let oracle = x_norm_projection_oracle(&q_dot, &sens, &bounds).unwrap();
        prop_assert!((inner.u - oracle).amax() <= 1e-6);
    }

    /// Droop output lies in the box and never increases with voltage.
    #[test]
    fn droop_in_box_and_monotone(
        v in 0.85f64..1.15,
        dv in 0.0f64..0.05,
        q_max in 0.01f64..0.5,
    ) {
        let curve = DroopCurve::default();
        let q_min = -q_max;
        let a = droop_update(&curve, v, q_min, q_max);
        let b = droop_update(&curve, v + dv, q_min, q_max);
        prop_assert!(a >= q_min && a <= q_max);
        prop_assert!(b <= a + 1e-15);
    }

    /// Network files round-trip through SI and back bit-accurately enough
    /// to preserve every sensitivity entry.
    #[test]
    fn network_file_round_trip(seed in 0u64..10_000, n in 2usize..25, tag: u8) {
        let net = feeder(seed, n + 1, tag);
        let dir = std::env::temp_dir().join("voltlab-prop-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("net-{seed}-{n}.net"));
        save_network(&net, &path).unwrap();
        let back = load_network(&path).unwrap();
        std::fs::remove_file(&path).ok();

        let a = build_sensitivities(&net).unwrap();
        let b = build_sensitivities(&back).unwrap();
        prop_assert!((a.x - b.x).amax() <= 1e-12);
        let (lo_a, hi_a) = net.q_limits();
        let (lo_b, hi_b) = back.q_limits();
        prop_assert!((lo_a - lo_b).amax() <= 1e-12 && (hi_a - hi_b).amax() <= 1e-12);
    }

    /// Profile CSVs round-trip in both unit conventions.
    #[test]
    fn profile_round_trip(seed in 0u64..10_000, n in 2usize..10) {
        let net = feeder(seed, n + 1, 1);
        let ts = generate_profiles(seed, &net, 60.0, 6.0).unwrap();
        let dir = std::env::temp_dir().join("voltlab-prop-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("prof-{seed}-{n}.csv"));
        save_profiles(&ts, &path).unwrap();
        let back = load_profiles(&path, ProfileUnits::PerUnit, net.s_base).unwrap();
        std::fs::remove_file(&path).ok();
        prop_assert_eq!(&ts.timestamps, &back.timestamps);
        for k in 0..ts.len() {
            prop_assert!((&ts.p_generation[k] - &back.p_generation[k]).amax() <= 1e-12);
            prop_assert!((&ts.p_demand[k] - &back.p_demand[k]).amax() <= 1e-12);
            prop_assert!((&ts.q_demand[k] - &back.q_demand[k]).amax() <= 1e-12);
        }
    }
}
