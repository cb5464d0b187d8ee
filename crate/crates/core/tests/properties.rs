use nldecay::analysis::{discrete_iteration, gramian_constant, half_time_series, HalfTime};
use nldecay::convexity::{ConvexityProfile, GrowthFunction};
use nldecay::exec::Executor;
use nldecay::feedback::FeedbackMap;
use nldecay::integrate::{simulate, RecordOptions, TimeScheme, TimeViscosity};
use nldecay::models::{build_model, initial_state, ModelKind, ModelSpec, Probe};
use proptest::prelude::*;

const FEEDBACKS: [&str; 5] = ["linear", "power", "power_log", "exp_inv_sq", "exp_log_pow"];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn energy_is_monotone_and_balanced(
        which in 0..FEEDBACKS.len(),
        amplitude in 0.1f64..3.0,
        seed in 0u64..1000,
        bounded in any::<bool>(),
    ) {
        let f = FeedbackMap::catalog(FEEDBACKS[which], Some(3.0), Some(1.0)).unwrap();
        let sys = build_model(&ModelSpec::new(ModelKind::Wave1d, 16, f)).unwrap();
        let tv = if bounded { TimeViscosity::BoundedSquared } else { TimeViscosity::Squared };
        let scheme = TimeScheme::default_for(&sys).with_time_viscosity(tv);
        let u0 = initial_state(&sys, Probe::Random, amplitude, seed);
        let rec = simulate(&sys, &scheme, &u0, 0.5, RecordOptions::default()).unwrap();
        let e0 = rec.initial_energy().max(1.0);
        prop_assert!(rec.max_residual() <= 1e-10 * e0, "residual {}", rec.max_residual());
        prop_assert!(rec.is_monotone(1e-12 * e0));
    }

    #[test]
    fn power_feedback_is_odd_and_sign_preserving(p in 1.0f64..6.0, s in -50.0f64..50.0) {
        let f = FeedbackMap::catalog("power", Some(p), None).unwrap();
        let r = f.rho(0.5, s).unwrap();
        prop_assert!(s * r >= 0.0);
        prop_assert!((r + f.rho(0.5, -s).unwrap()).abs() <= 1e-14 * r.abs().max(1.0));
    }

    #[test]
    fn fenchel_young_holds(p in 1.5f64..5.0, s in 0.0f64..1.0, r in 0.0f64..20.0) {
        let prof = ConvexityProfile::new(GrowthFunction::power(p).unwrap(), 1.0).unwrap();
        let s = s * prof.s0sq();
        let lhs = s * r;
        let rhs = prof.h(s).unwrap() + prof.conjugate(r).unwrap();
        prop_assert!(lhs <= rhs + 1e-12 * rhs.max(1.0), "{lhs} > {rhs}");
    }

    #[test]
    fn l_inverse_round_trips(p in 1.5f64..5.0, frac in 0.01f64..0.99) {
        let prof = ConvexityProfile::new(GrowthFunction::power(p).unwrap(), 1.0).unwrap();
        let y = frac * prof.s0sq();
        let r = prof.inv_l(y).unwrap();
        let back = prof.l(r).unwrap();
        prop_assert!((back - y).abs() <= 1e-9 * y, "{back} vs {y}");
    }

    #[test]
    fn half_time_of_an_exponential(rate in 0.05f64..5.0) {
        let times: Vec<f64> = (0..=4000).map(|k| k as f64 * 1e-3).collect();
        let energies: Vec<f64> = times.iter().map(|t| (-rate * t).exp()).collect();
        let exact = std::f64::consts::LN_2 / rate;
        match half_time_series(&times, &energies, 0.5).unwrap() {
            HalfTime::Reached(t) => prop_assert!((t - exact).abs() <= 1e-3, "{t} vs {exact}"),
            HalfTime::NotReached { final_ratio } => {
                prop_assert!(exact > 4.0);
                prop_assert!(final_ratio > 0.5);
            }
        }
    }

    #[test]
    fn iteration_bound_dominates_its_own_recursion(rho in 0.05f64..1.0, e0 in 0.01f64..0.2, windows in 2usize..12) {
        // cubic growth: L⁻¹(x) = 4x, so the tight recursion is e ↦ e − 4ρe²
        let prof = ConvexityProfile::new(GrowthFunction::power(3.0).unwrap(), 1.0).unwrap();
        let mut e = vec![e0];
        for _ in 0..windows {
            let x = *e.last().unwrap();
            e.push(x - rho * 4.0 * x * x);
        }
        let rep = discrete_iteration(&prof, &e, Some(rho)).unwrap();
        prop_assert!(rep.all_consistent());
        for w in &rep.windows {
            prop_assert!(w.energy_bound.unwrap() >= w.energy * (1.0 - 1e-9));
        }
    }

    #[test]
    fn gramian_is_symmetric_with_nonnegative_constant(n in 6usize..20, t_obs in 0.2f64..2.0) {
        let f = FeedbackMap::catalog("linear", None, None).unwrap();
        let sys = build_model(&ModelSpec::new(ModelKind::Wave1d, n, f)).unwrap();
        let scheme = TimeScheme::default_for(&sys);
        let rep = gramian_constant(&sys, t_obs, false, &scheme, &Executor::sequential()).unwrap();
        prop_assert!(rep.symmetry_error <= 1e-12);
        prop_assert!(rep.c_t >= 0.0);
    }
}
