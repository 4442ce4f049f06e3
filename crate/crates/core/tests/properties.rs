//! Property tests for invariants stated by the modules.

use std::sync::OnceLock;

use proptest::prelude::*;
use qsdlab::eigen::EigenSolver;
use qsdlab::montecarlo::{ks_statistic, simulate_killed, InitialLaw, SimConfig};
use qsdlab::numeric::{hermite, log_add_exp};
use qsdlab::qsd::{QsdBuilder, QsdDistribution};
use qsdlab::{parse_drift, Diffusion};

fn minimal_const1() -> &'static QsdDistribution {
    static D: OnceLock<QsdDistribution> = OnceLock::new();
    D.get_or_init(|| {
        let diff = Diffusion::new(parse_drift("const:1").unwrap());
        let report = diff.classify_boundaries().unwrap();
        let solver = EigenSolver::new(&diff);
        let lc = solver.lambda_c(&report).unwrap();
        QsdBuilder::new(&solver, &lc).minimal().unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(24) })]

    #[test]
    fn scale_function_increases(a in -2.0f64..2.0, x in 0.01f64..5.0, dx in 0.01f64..5.0) {
        let d = Diffusion::new(parse_drift(&format!("const:{a}")).unwrap());
        prop_assert!(d.log_scale(x).unwrap() < d.log_scale(x + dx).unwrap());
    }

    #[test]
    fn speed_tail_decreases(a in 0.2f64..3.0, x in 0.0f64..5.0, dx in 0.01f64..5.0) {
        let d = Diffusion::new(parse_drift(&format!("linear:{a}")).unwrap());
        let lo = d.mu_tail(x).unwrap();
        let hi = d.mu_tail(x + dx).unwrap();
        prop_assert!(lo.is_finite() && hi.is_finite());
        prop_assert!(hi.log_partial < lo.log_partial);
    }

    #[test]
    fn delta_sandwich_brackets_lambda_c(a in 0.3f64..2.5, b in 0.0f64..1.5) {
        let diff = Diffusion::new(parse_drift(&format!("{a} + {b}*x/(1+x)")).unwrap());
        let report = diff.classify_boundaries().unwrap();
        let delta = report.delta_finite().unwrap();
        let lc = EigenSolver::new(&diff).lambda_c(&report).unwrap();
        prop_assert!(0.25 / delta <= lc.hi && lc.lo <= 1.0 / delta);
    }

    #[test]
    fn sign_change_moves_inward_with_lambda(l1 in 0.55f64..1.5, dl in 0.05f64..1.0) {
        let diff = Diffusion::new(parse_drift("const:1").unwrap());
        let s = EigenSolver::new(&diff);
        let x1 = s.classify(l1).unwrap().first_sign_change.unwrap();
        let x2 = s.classify(l1 + dl).unwrap().first_sign_change.unwrap();
        prop_assert!(x2 < x1);
    }

    #[test]
    fn no_sign_change_below_lambda_c(f in 0.05f64..0.99) {
        let diff = Diffusion::new(parse_drift("linear:1").unwrap());
        prop_assert!(EigenSolver::new(&diff).classify(f).unwrap().first_sign_change.is_none());
    }

    #[test]
    fn qsd_cdf_monotone_and_quantile_inverts(y in 0.01f64..20.0, dy in 0.001f64..5.0) {
        let d = minimal_const1();
        let (c1, c2) = (d.cdf_at(y), d.cdf_at(y + dy));
        prop_assert!(c1 <= c2);
        prop_assert!(c1 >= 0.0 && c2 <= d.total_mass());
        prop_assert!((d.total_mass() - 1.0).abs() < 1e-6);
        let back = d.quantile(c1).unwrap();
        prop_assert!((back - y).abs() < 1e-6 * (1.0 + y), "{back} vs {y}");
    }

    #[test]
    fn hermite_reproduces_cubics(c in proptest::array::uniform4(-3.0f64..3.0), x0 in -2.0f64..2.0, h in 0.1f64..3.0, t in 0.0f64..1.0) {
        let p = |x: f64| c[0] + c[1] * x + c[2] * x * x + c[3] * x * x * x;
        let dp = |x: f64| c[1] + 2.0 * c[2] * x + 3.0 * c[3] * x * x;
        let x1 = x0 + h;
        let x = x0 + t * h;
        let v = hermite(x0, x1, p(x0), p(x1), dp(x0), dp(x1), x);
        prop_assert!((v - p(x)).abs() < 1e-9 * (1.0 + p(x).abs()));
    }

    #[test]
    fn log_add_exp_matches_direct_sum(a in -50.0f64..50.0, b in -50.0f64..50.0) {
        let direct = (a.exp() + b.exp()).ln();
        prop_assert!((log_add_exp(a, b) - direct).abs() < 1e-12 * (1.0 + direct.abs()));
        prop_assert_eq!(log_add_exp(a, b), log_add_exp(b, a));
    }

    #[test]
    fn ks_statistic_is_a_distance(v in proptest::collection::vec(0.0f64..1.0, 1..200)) {
        let d = ks_statistic(&v, |y| y.clamp(0.0, 1.0));
        prop_assert!(d > 0.0 && d <= 1.0);
        prop_assert!(d >= 0.5 / v.len() as f64);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(8) })]

    #[test]
    fn ensembles_are_deterministic_and_monotone(seed in any::<u64>(), a in -1.0f64..2.0) {
        let spec = parse_drift(&format!("const:{a}")).unwrap();
        let cfg = SimConfig::new(300, 1e-2, 2.0, seed).with_snapshots(&[0.5, 2.0]);
        let e1 = simulate_killed(&spec, InitialLaw::Point(1.0), &cfg).unwrap();
        let e2 = simulate_killed(&spec, InitialLaw::Point(1.0), &cfg).unwrap();
        prop_assert_eq!(&e1, &e2);
        let curve = e1.survival_curve();
        prop_assert!(curve.windows(2).all(|w| w[1].1 <= w[0].1));
        for s in &e1.snapshots {
            prop_assert_eq!(s.positions.len(), e1.survivors_at(s.t));
        }
    }

    #[test]
    fn bridge_only_adds_absorptions(seed in any::<u64>()) {
        let spec = parse_drift("const:1").unwrap();
        let d = minimal_const1();
        let cfg = SimConfig::new(2000, 1e-2, 1.0, seed);
        let with = simulate_killed(&spec, InitialLaw::Qsd(d), &cfg).unwrap();
        let without = simulate_killed(&spec, InitialLaw::Qsd(d), &SimConfig { bridge: false, ..cfg }).unwrap();
        for (a, b) in with.killing_times.iter().zip(&without.killing_times) {
            let ordered = match (a, b) {
                (Some(x), Some(y)) => x <= y,
                (None, Some(_)) => false,
                _ => true,
            };
            prop_assert!(ordered);
        }
    }
}
