//! Largest transmit power that respects the energy cap.

use super::{Link, RoundProblem, SchedulerConfig};
use crate::error::{Error, Result};
use crate::wireless::{link_rate, RadioParams};

/// Powers below `POWER_FLOOR_RATIO * P_max` are treated as unusable.
pub const POWER_FLOOR_RATIO: f64 = 1e-6;

const BISECTION_STEPS: usize = 200;

pub fn power_floor(radio: &RadioParams) -> f64 {
    POWER_FLOOR_RATIO * radio.max_power_w
}

/// Upload energy `P * bits / rate(P)`; increasing in `P`.
pub fn uplink_energy(power_w: f64, bits: f64, gain: f64, radio: &RadioParams) -> f64 {
    power_w * bits / link_rate(power_w, gain, radio.interference_w, radio)
}

/// `min(P_max, P_th)`, where `P_th` solves `E_co(P) = budget`; `None` when
/// even the power floor overspends.
pub fn threshold_power(bits: f64, gain: f64, budget_j: f64, radio: &RadioParams) -> Option<f64> {
    let p_max = radio.max_power_w;
    if !(budget_j > 0.0) {
        return None;
    }
    if uplink_energy(p_max, bits, gain, radio) <= budget_j {
        return Some(p_max);
    }
    let mut lo = power_floor(radio);
    if uplink_energy(lo, bits, gain, radio) > budget_j {
        return None;
    }
    let mut hi = p_max;
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if uplink_energy(mid, bits, gain, radio) <= budget_j {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(lo)
}

/// Power for each assigned client given its rate.
pub fn optimal_power(problem: &RoundProblem, links: &[Link], rates: &[f64], cfg: &SchedulerConfig) -> Result<Vec<f64>> {
    links
        .iter()
        .zip(rates)
        .map(|(l, &s)| {
            let client = problem.candidates[l.candidate].client;
            let budget = problem.upload_energy(l.candidate, cfg);
            if budget <= 0.0 {
                return Err(Error::EnergyInfeasible {
                    client,
                    reason: format!("computation alone exceeds E_max by {} J", -budget),
                });
            }
            let gain = problem.candidates[l.candidate].uplink_gains[l.channel];
            threshold_power(problem.uplink_bits(s), gain, budget, &problem.radio).ok_or_else(|| {
                Error::EnergyInfeasible {
                    client,
                    reason: format!("upload at s={s} needs more than {budget} J"),
                }
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::testutil::random_problem;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generous_budget_uses_full_power() {
        let radio = RadioParams::default();
        assert_eq!(threshold_power(1e5, 1e-9, 1e9, &radio), Some(radio.max_power_w));
    }

    #[test]
    fn root_residual_is_tiny() {
        let radio = RadioParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let bits = rng.random_range(1e4..1e7);
            let gain = 10f64.powf(rng.random_range(-11.0..-8.0));
            let full = uplink_energy(radio.max_power_w, bits, gain, &radio);
            let budget = full * rng.random_range(0.3..0.99);
            let Some(p) = threshold_power(bits, gain, budget, &radio) else {
                continue;
            };
            assert!(p < radio.max_power_w);
            let residual = budget - uplink_energy(p, bits, gain, &radio);
            assert!((0.0..=1e-9).contains(&residual), "{residual}");
        }
    }

    #[test]
    fn energy_increases_with_power() {
        let radio = RadioParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let bits = rng.random_range(1e3..1e7);
            let gain = 10f64.powf(rng.random_range(-12.0..-7.0));
            let p = rng.random_range(1e-3..1.0);
            let h = 1e-6 * p;
            let slope =
                (uplink_energy(p + h, bits, gain, &radio) - uplink_energy(p - h, bits, gain, &radio)) / (2.0 * h);
            assert!(slope > 0.0);
        }
    }

    #[test]
    fn infeasible_budgets_are_flagged() {
        let radio = RadioParams::default();
        assert_eq!(threshold_power(1e6, 1e-10, 0.0, &radio), None);
        assert_eq!(threshold_power(1e12, 1e-12, 1e-9, &radio), None);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_problem(2, 1, 1.0, &mut rng);
        let cfg = SchedulerConfig {
            e_max: 1e-12,
            ..SchedulerConfig::default()
        };
        let err = optimal_power(
            &p,
            &[Link {
                candidate: 1,
                channel: 0,
            }],
            &[1.0],
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(err, Error::EnergyInfeasible { client: 1, .. }));
    }
}
