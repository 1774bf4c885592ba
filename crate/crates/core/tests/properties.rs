use std::path::Path;

use hj_ensemble::acceptance::derivative_property;
use hj_ensemble::advect::conservative_step;
use hj_ensemble::grid::{Axes, Axis, GridField, GridSpec};
use hj_ensemble::hj::{hj_residual, jacobi_recover_q, AnalyticAction, CompleteIntegral};
use hj_ensemble::io::traj::{parse_trajectory, render_trajectory};
use hj_ensemble::io::Snapshot;
use hj_ensemble::lagrangian::{integrate_ensemble, integrate_trajectory, EnsembleCloud, IntegrationOptions, PhaseState, Trajectory};
use hj_ensemble::model::{self, Charge, EmPotentials};
use hj_ensemble::multilayer::{mix_density, Layer};
use proptest::prelude::*;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        ..ProptestConfig::default()
    }
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        -1e3..1e3f64,
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE / 4.0),
    ]
}

proptest! {
    #![proptest_config(config(48))]

    #[test]
    fn symbolic_derivatives_match_differences(seed in any::<u64>()) {
        let worst = derivative_property(seed, 4, 8).unwrap();
        prop_assert!(worst < 1e-6, "worst relative mismatch {worst}");
    }

    #[test]
    fn snapshots_round_trip_bitwise(values in prop::collection::vec(finite(), 18), t in finite()) {
        let spec = GridSpec::new(vec![Axis::outflow(-1.0, 2.0, 3), Axis::outflow(0.0, 1.0, 3)]).unwrap();
        let mut field = GridField::zeros(&spec, 2, t).with_axes(Axes::P);
        field.values.copy_from_slice(&values);
        let text = Snapshot::from_field(&field, &["a", "b"]).unwrap().render();
        let back = Snapshot::parse(&text, Path::new("x")).unwrap().field(&["a", "b"]).unwrap();
        prop_assert_eq!(back.t.to_bits(), t.to_bits());
        for (a, b) in back.values.iter().zip(&values) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn trajectories_round_trip_bitwise(rows in prop::collection::vec(prop::collection::vec(finite(), 5), 1..6)) {
        let traj = Trajectory {
            model: "pair".into(),
            samples: rows.iter().map(|r| PhaseState::new(r[0], r[1..3].to_vec(), r[3..].to_vec())).collect(),
        };
        let back = parse_trajectory(&render_trajectory(&traj), Path::new("x")).unwrap();
        for (a, b) in back.samples.iter().zip(&traj.samples) {
            let bits = |s: &PhaseState| -> Vec<u64> {
                std::iter::once(s.t).chain(s.q.iter().copied()).chain(s.p.iter().copied()).map(f64::to_bits).collect()
            };
            prop_assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn mass_is_conserved_on_periodic_grids(
        rho in prop::collection::vec(0.0..5.0f64, 40),
        speed in prop::collection::vec(-1.0..1.0f64, 40),
        steps in 1usize..200,
    ) {
        let spec = GridSpec::new(vec![Axis::periodic(0.0, 2.0, 40)]).unwrap();
        let mut r = GridField::zeros(&spec, 1, 0.0);
        r.values.copy_from_slice(&rho);
        let mut g = GridField::zeros(&spec, 1, 0.0);
        g.values.copy_from_slice(&speed);
        let m0 = r.integral(0);
        for _ in 0..steps {
            r = conservative_step(&g, &r, 0.02).unwrap().0;
        }
        prop_assert!((r.integral(0) - m0).abs() <= 1e-12 * m0.max(1.0));
    }

    #[test]
    fn mixing_is_linear_in_the_weights(w in 0.0..1.0f64, a in prop::collection::vec(0.0..3.0f64, 9), b in prop::collection::vec(0.0..3.0f64, 9)) {
        let spec = GridSpec::line(0.0, 1.0, 9).unwrap();
        let layer = |i: usize, vals: &[f64]| {
            let mut rho = GridField::zeros(&spec, 1, 0.0);
            rho.values.copy_from_slice(vals);
            Layer::new(i, rho, GridField::zeros(&spec, 1, 0.0)).unwrap()
        };
        let layers = [layer(0, &a), layer(1, &b)];
        let mixed = mix_density(&layers, &[w, 1.0 - w]).unwrap();
        let pure_a = mix_density(&layers, &[1.0, 0.0]).unwrap();
        let pure_b = mix_density(&layers, &[0.0, 1.0]).unwrap();
        for i in 0..9 {
            let lin = w * pure_a.values[i] + (1.0 - w) * pure_b.values[i];
            prop_assert!((mixed.values[i] - lin).abs() < 1e-14);
        }
    }
}

proptest! {
    #![proptest_config(config(16))]

    #[test]
    fn ensemble_results_follow_member_order(
        q in prop::collection::vec(-2.0..2.0f64, 6),
        p in prop::collection::vec(-2.0..2.0f64, 6),
        perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let model = model::harmonic_oscillator(1, 1.0, 1.3).unwrap();
        let states: Vec<PhaseState> = (0..6).map(|i| PhaseState::new(0.0, vec![q[i]], vec![p[i]])).collect();
        let shuffled: Vec<PhaseState> = perm.iter().map(|&i| states[i].clone()).collect();
        let opts = IntegrationOptions::rk4(0.01, 1.0);
        let (a, _) = integrate_ensemble(&model, &EnsembleCloud::uniform(states).unwrap(), &opts, false).unwrap();
        let (b, _) = integrate_ensemble(&model, &EnsembleCloud::uniform(shuffled).unwrap(), &opts, false).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(&b.states[k], &a.states[i]);
        }
    }

    #[test]
    fn reversible_flow_returns_home(q0 in -2.0..2.0f64, p0 in -2.0..2.0f64, leapfrog in any::<bool>()) {
        let model = model::harmonic_oscillator(1, 1.0, 1.0).unwrap();
        let opts = if leapfrog { IntegrationOptions::leapfrog(1e-3, 2.0) } else { IntegrationOptions::rk4(1e-3, 2.0) };
        let there = integrate_trajectory(&model, &PhaseState::new(0.0, vec![q0], vec![p0]), &opts).unwrap();
        let end = there.last();
        let back = integrate_trajectory(&model, &PhaseState::new(0.0, end.q.clone(), vec![-end.p[0]]), &opts).unwrap();
        let home = back.last();
        prop_assert!((home.q[0] - q0).abs() < 1e-9);
        prop_assert!((home.p[0] + p0).abs() < 1e-9);
    }

    #[test]
    fn jacobi_recovery_ignores_the_parametrisation(q0 in -1.0..1.0f64, p0 in 0.2..2.0f64) {
        // β = p and β' = p^(1/3) describe the same free orbit
        let times: Vec<f64> = (0..6).map(|k| 0.2 * k as f64).collect();
        let plain = CompleteIntegral::parse(1, Axes::Q, "b1*x - b1^2*t/2").unwrap();
        let cubed = CompleteIntegral::parse(1, Axes::Q, "b1^3*x - b1^6*t/2").unwrap();
        let b = p0.cbrt();
        let a = jacobi_recover_q(&plain, &[p0], &[q0], &times, &[q0]).unwrap();
        let c = jacobi_recover_q(&cubed, &[b], &[3.0 * b * b * q0], &times, &[q0]).unwrap();
        for (x, y) in a.samples.iter().zip(&c.samples) {
            prop_assert!((x.q[0] - y.q[0]).abs() < 1e-10);
            prop_assert!((x.p[0] - y.p[0]).abs() < 1e-10);
        }
    }

    #[test]
    fn residual_is_gauge_covariant(
        k in prop::array::uniform3(-1.0..1.0f64),
        c in prop::array::uniform3(-1.0..1.0f64),
        pts in prop::collection::vec((0.0..1.0f64, prop::array::uniform3(-1.0..1.0f64)), 5),
    ) {
        // A -> A + k with S -> S + (e/c) k·r leaves the residual unchanged
        let charge = Charge { m: 1.2, e: 0.7, c: 1.5 };
        let a_base = ["-0.5*y", "0.5*x", "0"];
        let a_shift: Vec<String> = a_base.iter().zip(&k).map(|(a, k)| format!("{a} + ({k})")).collect();
        let base = model::em_particle(charge, EmPotentials::from_exprs("0.1*z", a_base).unwrap()).unwrap();
        let shifted = model::em_particle(
            charge,
            EmPotentials::from_exprs("0.1*z", [&a_shift[0], &a_shift[1], &a_shift[2]]).unwrap(),
        ).unwrap();
        let s = format!("({})*x*y + ({})*z^2 - ({})*t*x", c[0], c[1], c[2]);
        let ec = charge.e / charge.c;
        let s_shift = format!("{s} + {ec}*(({})*x + ({})*y + ({})*z)", k[0], k[1], k[2]);
        let s = AnalyticAction::parse(3, &s).unwrap();
        let s_shift = AnalyticAction::parse(3, &s_shift).unwrap();
        for (t, r) in &pts {
            let r0 = hj_residual(&base, &s, *t, r).unwrap();
            let r1 = hj_residual(&shifted, &s_shift, *t, r).unwrap();
            prop_assert!((r0 - r1).abs() < 1e-12 * r0.abs().max(1.0));
        }
    }
}
