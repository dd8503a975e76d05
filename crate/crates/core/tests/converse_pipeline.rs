use std::sync::Arc;

use ipss_core::certificates::check_envelope;
use ipss_core::converse::{ConverseCandidate, ConverseError};
use ipss_core::lyapunov::{dini_derivative, sigma_for};
use ipss_core::scalar::{lin_grid, log_grid};
use ipss_core::signals::random_piecewise_constant;
use ipss_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg() -> ConverseConfig {
    ConverseConfig {
        disturbance_samples: 16,
        ..ConverseConfig::default()
    }
}

fn candidate_for(sys: &SystemDef<f64>, lambda: f64) -> Result<ConverseCandidate<f64>, ConverseError> {
    let beta = KLBound::exponential(1.0, lambda).unwrap();
    let (theta1, theta2) = sontag_factorize_exponential(1.0, 0.5).unwrap();
    iss_to_dissipation_candidate(sys, make_power_fn(0.5, 1.0).unwrap(), beta, &theta1, &theta2, &cfg())
}

fn dissipation_spec() -> DissipationSpec<f64> {
    DissipationSpec {
        alpha4: make_power_fn(0.1, 2.0).unwrap(),
        chi4: MonotoneFn::identity(),
    }
}

#[test]
fn linear_feedback_candidate_is_dissipative() {
    let sys = linear_test_system(1.0).unwrap();
    let cand = candidate_for(&sys, 0.5).unwrap();
    let v = &cand.candidate;
    assert_eq!(v.eval(0.0, &[0.0]), 0.0);
    for r in [0.5, 1.0, 3.0] {
        let val = v.eval(0.0, &[r]);
        assert!(val >= v.alpha1.eval(r) * 0.95 && val <= v.alpha2.eval(r), "V({r}) = {val}");
    }
    let mut input_radii = vec![0.0];
    input_radii.extend(log_grid(0.05, 3.0, 5));
    let plan = SamplingPlan::new(vec![0.0, 1.3], lin_grid(0.05, 3.0, 7), input_radii, 3).with_margin(0.1);
    let rep = check_dissipation_form(v, &sys, &dissipation_spec(), &plan).unwrap();
    assert!(rep.passed(), "{:?}", rep.violations.first());
    assert!(rep.checked > 0);
    assert!(cand.evaluator.cached_entries() > 0);
}

#[test]
fn input_free_system_decays_at_half_rate() {
    let sys = SystemDef::new("decay", 1, 1, |_t, x: &[f64], _u: &[f64], o: &mut [f64]| o[0] = -x[0]).unwrap();
    let cand = candidate_for(&sys, 0.5).unwrap();
    for r in [0.5, 1.0, 2.0, 3.0] {
        for mu in [0.0, 5.0] {
            let v = cand.candidate.eval(0.0, &[r]);
            let d = dini_derivative(&cand.candidate, &sys, 0.0, &[r], &[mu], 1e-3, 8).unwrap();
            assert!(d <= -0.5 * v + 1e-6, "r = {r}: D⁺V = {d}, V = {v}");
        }
    }
}

#[test]
fn inadequate_feedback_is_reported() {
    let sys = linear_test_system(1.0).unwrap();
    let err = candidate_for(&sys, 2.0).unwrap_err();
    match err {
        ConverseError::Model(m) => assert!(m.contains("φ"), "{m}"),
        other => panic!("{other}"),
    }
}

#[test]
fn candidate_gains_bound_simulations() {
    let sys = linear_test_system(1.0).unwrap();
    let cand = candidate_for(&sys, 0.5).unwrap();
    let spec = dissipation_spec();
    let alpha2 = cand.candidate.alpha2.clone();
    let sigma = sigma_for(&alpha2, &spec.alpha4);
    let bundle = Arc::new(build_kappa(&sigma, 1e-3, 1e3, 1e-10).unwrap());
    let gains = ipss_gains_from_dissipation(&cand.candidate.alpha1, &alpha2, &spec, 1.0, bundle).unwrap();
    let cert = Certificate::from_gains(&gains);
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xi: f64 = rng.gen_range(-3.0..=3.0);
        let pieces = rng.gen_range(1..=12);
        let u = random_piecewise_constant(&mut rng, 1, pieces, 0.5, 1.0);
        let traj = simulate(&sys, 0.0, &[xi], &u, u.horizon() + 2.0, 1e-2).unwrap();
        let rep = check_envelope(&traj, &cert, &u, xi.abs(), 0.0, Some(0.1)).unwrap();
        assert!(rep.satisfied, "seed {seed}: margin {} at {}", rep.margin, rep.worst_time);
    }
}

#[test]
fn candidate_exports_to_table() {
    let sys = linear_test_system(1.0).unwrap();
    let cand = candidate_for(&sys, 0.5).unwrap();
    let xs = lin_grid(-3.0, 3.0, 13);
    let table = cand.candidate.tabulate(&[0.0, 2.0], &xs);
    let back = LyapunovCandidate::from_table(&table, cand.candidate.alpha1.clone(), cand.candidate.alpha2.clone()).unwrap();
    for &x in &xs {
        assert!((back.eval(1.0, &[x]) - cand.candidate.eval(0.0, &[x])).abs() <= 1e-12);
    }
}
