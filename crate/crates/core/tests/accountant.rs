use proptest::prelude::*;

use sparfl::accountant::{participation_fraction, per_step_rdp, PrivacyLedger, RdpCurve, RdpParams};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn monotone_in_rate_order_and_noise(
        q in 0.01f64..0.9,
        dq in 0.0f64..0.1,
        sigma in 0.5f64..2.0,
        ds in 0.0f64..0.5,
        alpha in 1.5f64..32.0,
        da in 0.0f64..8.0,
    ) {
        let base = per_step_rdp(q, sigma, alpha).unwrap();
        let tol = 1e-9 * (1.0 + base);
        prop_assert!(base >= 0.0);
        prop_assert!(base <= alpha * (alpha - 1.0) / (2.0 * sigma * sigma) * (1.0 + 1e-9));
        prop_assert!(per_step_rdp(q + dq, sigma, alpha).unwrap() >= base - tol);
        prop_assert!(per_step_rdp(q, sigma, alpha + da).unwrap() >= base - tol);
        prop_assert!(per_step_rdp(q, sigma + ds, alpha).unwrap() <= base + tol);
    }

    #[test]
    fn accumulation_is_monotone(q in 0.01f64..1.0, sigma in 0.5f64..2.0, tau in 1usize..20, t in 0u64..200) {
        let curve = RdpCurve::new(&RdpParams::new(q, sigma, tau)).unwrap();
        prop_assert!(curve.accumulate(t + 1).eps >= curve.accumulate(t).eps);
    }

    #[test]
    fn ledger_invariants(q in 0.02f64..0.5, sigma in 0.6f64..2.0, eps in 1.0f64..15.0, steps in 0usize..400) {
        let mut ledger = PrivacyLedger::new(&RdpParams::new(q, sigma, 2), eps).unwrap();
        for _ in 0..steps {
            if ledger.exhausted() {
                break;
            }
            ledger.record_exposure();
        }
        prop_assert!(ledger.beta() >= 0.0 && ledger.beta() <= 1.0);
        if ledger.exhausted() {
            prop_assert!(ledger.curve().unwrap().accumulate(ledger.exposures() + 1).eps > eps);
            prop_assert!(ledger.exposures() <= ledger.t_hat());
        } else {
            prop_assert!(ledger.curve().unwrap().accumulate(ledger.exposures() + 1).eps <= eps);
        }
    }

    #[test]
    fn participation_fractions_are_capped(t in prop::collection::vec(1u64..500, 1..20), n in 1usize..8) {
        let beta = participation_fraction(&t, n).unwrap();
        let total: u64 = t.iter().sum();
        for (b, &ti) in beta.iter().zip(&t) {
            let want = (n as f64 * ti as f64 / total as f64).min(1.0);
            prop_assert!((b - want).abs() < 1e-12);
        }
    }
}
