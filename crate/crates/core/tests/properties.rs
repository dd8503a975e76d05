use ipss_core::converse::{extreme_sample_count, g_k, horizon_rk, wk_estimate, wk_series};
use ipss_core::signals::random_piecewise_constant;
use ipss_core::simulator::simulate_with_stops;
use ipss_core::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn power(c: f64, p: f64) -> MonotoneFn<f64> {
    make_power_fn(c, p).unwrap()
}

fn random_signal(seed: u64, pieces: usize, piece_len: f64, amp: f64) -> Signal<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_piecewise_constant(&mut rng, 1, pieces, piece_len, amp)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn inversion_round_trip(c in 0.1f64..10.0, p in 0.2f64..5.0, e in -6.0f64..6.0) {
        let f = power(c, p);
        let y = 10f64.powf(e);
        let x = invert(&f, y, 1e-10).unwrap();
        prop_assert!(((f.eval(x) - y) / y).abs() <= 1e-8, "f({x}) = {} vs {y}", f.eval(x));
    }

    #[test]
    fn compose_is_associative(
        a in (0.2f64..3.0, 0.3f64..3.0),
        b in (0.2f64..3.0, 0.3f64..3.0),
        c in (0.2f64..3.0, 0.3f64..3.0),
        s in 0.0f64..20.0,
    ) {
        let (f, g, h) = (power(a.0, a.1), power(b.0, b.1), power(c.0, c.1));
        let sat = MonotoneFn::from_closure(ClassTag::K, |x: f64| x / (1.0 + x));
        for inner in [h, sat] {
            let left = compose(&compose(&f, &g), &inner).eval(s);
            let right = compose(&f, &compose(&g, &inner)).eval(s);
            prop_assert!((left - right).abs() <= 1e-12 * (1.0 + left.abs()), "{left} vs {right}");
        }
    }

    #[test]
    fn sontag_factorization_is_exact(k in 1.0f64..5.0, lambda in 0.2f64..2.0) {
        let (t1, t2) = sontag_factorize_exponential(k, lambda).unwrap();
        let beta = KLBound::exponential(k, lambda).unwrap();
        let inv = t2.inverse();
        for i in 0..20 {
            let s = 0.01 * 1.4f64.powi(i);
            for j in 0..20 {
                let t = 0.25 * j as f64;
                let lhs = inv.eval(beta.eval(s, t));
                let rhs = t1.eval(s) * (-t).exp();
                prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.max(f64::MIN_POSITIVE), "s={s} t={t}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn power_norm_bounded_by_sup_and_energy(seed in any::<u64>(), p in 0.5f64..2.0, window in 0.2f64..4.0) {
        let u = random_signal(seed, 12, 0.7, 3.0);
        let rho = power(1.0, p);
        let h = u.horizon();
        let pn = avg_power_norm(&u, &rho, window).unwrap().value();
        let sup = sup_norm(&u, 0.0, h).unwrap().value();
        let energy = rho_energy(&u, &rho, 0.0, h).unwrap().value();
        prop_assert!(pn <= rho.eval(sup) * (1.0 + 1e-12));
        prop_assert!(pn <= energy / window * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn window_scaling(seed in any::<u64>(), t in 0.2f64..5.0, t_star in 0.2f64..5.0) {
        let u = random_signal(seed, 10, 0.6, 2.0);
        let rho = power(1.0, 1.0);
        let a = avg_power_norm(&u, &rho, t).unwrap().value();
        let b = avg_power_norm(&u, &rho, t_star).unwrap().value();
        let factor = (t / t_star).ceil() * t_star / t;
        prop_assert!(a <= factor * b * (1.0 + 1e-12) + 1e-15, "{a} > {factor}·{b}");
    }

    #[test]
    fn concat_preserves_prefix_energy(s1 in any::<u64>(), s2 in any::<u64>(), tau in 0.1f64..6.0) {
        let u = random_signal(s1, 8, 0.5, 2.0);
        let v = random_signal(s2, 8, 0.9, 5.0);
        let rho = power(1.0, 0.5);
        let w = concat(&u, &v, tau).unwrap();
        let lhs = rho_energy(&w, &rho, 0.0, tau).unwrap().value();
        let rhs = rho_energy(&u, &rho, 0.0, tau).unwrap().value();
        prop_assert_eq!(lhs, rhs);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn simulation_semigroup(seed in any::<u64>(), xi in -5.0f64..5.0, t0 in 0.0f64..3.0) {
        let sys = counterexample_system::<f64>();
        let u = random_signal(seed, 16, 0.5, 2.0);
        let step = 0.01;
        let (t1, t2) = (t0 + 2.0, t0 + 4.0);
        let long = simulate_with_stops(&sys, t0, &[xi], &u, t2, step, &[t1]).unwrap();
        let short = simulate_with_stops(&sys, t0, &[xi], &u, t1, step, &[]).unwrap();
        let prefix = long.truncated(t1);
        prop_assert_eq!(&prefix.times, &short.times);
        prop_assert_eq!(&prefix.states, &short.states);
        let mid = long.state_at(t1).unwrap().to_vec();
        let tail = simulate_with_stops(&sys, t1, &mid, &u, t2, step, &[]).unwrap();
        for (&t, x) in tail.times.iter().zip(&tail.states) {
            let y = long.state_at(t).unwrap();
            prop_assert!((x[0] - y[0]).abs() <= 1e-9);
        }
    }

    #[test]
    fn simulation_is_causal(seed in any::<u64>(), other in any::<u64>(), xi in -3.0f64..3.0) {
        let sys = linear_test_system::<f64>(1.0).unwrap();
        let u = random_signal(seed, 8, 0.5, 2.0);
        let tail = random_signal(other, 8, 0.5, 7.0);
        let t_end = 3.0;
        let changed = concat(&u, &tail, t_end).unwrap();
        let a = simulate(&sys, 0.0, &[xi], &u, t_end, 0.01).unwrap();
        let b = simulate(&sys, 0.0, &[xi], &changed, t_end, 0.01).unwrap();
        prop_assert_eq!(a.times, b.times);
        prop_assert_eq!(a.states, b.states);
    }
}

fn converse_setup() -> (converse::DisturbedSystem<f64>, MonotoneFn<f64>, MonotoneFn<f64>) {
    let beta = KLBound::exponential(1.0, 0.5).unwrap();
    let (theta1, theta2) = sontag_factorize_exponential(1.0, 0.5).unwrap();
    let rho = regularized_rho(&theta2, &scalar::lin_grid(0.0, 10.0, 2001)).unwrap();
    (DisturbedSystem::new(perturbed_decay_system(), beta), theta1, rho)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn wk_monotone_in_k_and_samples(xi in 0.3f64..4.0, t0 in 0.0f64..5.0, seed in any::<u64>(), extra in 1usize..12) {
        let (dsys, theta1, rho) = converse_setup();
        let small = ConverseConfig { disturbance_samples: extreme_sample_count(1) + 1, seed, ..ConverseConfig::default() };
        let large = ConverseConfig { disturbance_samples: small.disturbance_samples + extra, ..small.clone() };
        let a = wk_series(&dsys, t0, &[xi], &theta1, &rho, &small, 8).unwrap();
        let b = wk_series(&dsys, t0, &[xi], &theta1, &rho, &large, 8).unwrap();
        for k in 0..8 {
            prop_assert!(b[k].value >= a[k].value);
            prop_assert!(a[k].value <= theta1.eval(xi));
            if k > 0 {
                prop_assert!(a[k].value >= a[k - 1].value);
            }
        }
        let single = wk_estimate(&dsys, 3, t0, &[xi], &theta1, &rho, &small).unwrap();
        prop_assert_eq!(single.value, a[2].value);
    }

    #[test]
    fn gk_vanishes_after_horizon(xi in 0.1f64..5.0, c in -1.0f64..1.0, k in 1usize..10) {
        let (dsys, theta1, rho) = converse_setup();
        let horizon = horizon_rk(&theta1, xi, k);
        let d = Signal::constant(vec![c], 40.0).unwrap();
        let traj = simulate(&dsys.sys, 0.0, &[xi], &d, horizon + 10.0, 0.01).unwrap();
        for (&s, x) in traj.times.iter().zip(&traj.states) {
            if s >= horizon {
                prop_assert_eq!(g_k(rho.eval(x[0].abs()), k), 0.0);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn transformed_certificates_are_implied(
        seed in any::<u64>(),
        xi in -3.0f64..3.0,
        gain in 0.05f64..3.0,
        p in 0.5f64..2.0,
        q in 0.5f64..2.0,
        window in 0.2f64..3.0,
    ) {
        let sys = linear_test_system::<f64>(1.0).unwrap();
        let u = random_signal(seed, 10, 0.4, 2.0);
        let traj = simulate(&sys, 0.0, &[xi], &u, u.horizon() + 1.0, 0.01).unwrap();
        let beta = KLBound::exponential(1.0, 1.0).unwrap();
        let ipss = Certificate::ipss(beta, power(gain, p), power(1.0, q), window).unwrap();
        let (iss, iiss) = ipss_to_iss_iiss(&ipss).unwrap();
        let r = check_envelope(&traj, &ipss, &u, xi.abs(), 0.0, Some(0.0)).unwrap();
        let ri = check_envelope(&traj, &iss, &u, xi.abs(), 0.0, Some(0.0)).unwrap();
        let rii = check_envelope(&traj, &iiss, &u, xi.abs(), 0.0, Some(0.0)).unwrap();
        prop_assert!(ri.margin >= r.margin - 1e-12, "ISS {} < IPSS {}", ri.margin, r.margin);
        prop_assert!(rii.margin >= r.margin - 1e-12, "iISS {} < IPSS {}", rii.margin, r.margin);
        if r.satisfied {
            prop_assert!(ri.satisfied && rii.satisfied);
        }
    }
}
