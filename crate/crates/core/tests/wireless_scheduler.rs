use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sparfl::oracle::random_problem;
use sparfl::scheduler::power::uplink_energy;
use sparfl::scheduler::{
    baseline_schedule, check_constraints, schedule_round, update_queues, Policy, RoundRobinCursor, SchedulerConfig,
    VirtualQueues,
};
use sparfl::wireless::{link_rate, RadioParams};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rate_delay_and_energy_monotonicity(
        p in 1e-4f64..1.0,
        dp in 1e-3f64..0.5,
        log_h in -14.0f64..-8.0,
        dh in 1.01f64..3.0,
        bits in 1e3f64..1e7,
    ) {
        let radio = RadioParams::default();
        let h = 10f64.powf(log_h);
        let r = link_rate(p, h, 0.0, &radio);
        prop_assert!(link_rate(p * (1.0 + dp), h, 0.0, &radio) > r);
        prop_assert!(link_rate(p, h * dh, 0.0, &radio) > r);
        // Upload delay falls as the rate grows.
        prop_assert!(bits / link_rate(p * (1.0 + dp), h, 0.0, &radio) < bits / r);
        // Central difference of the upload energy in P.
        let step = 1e-6 * p;
        let slope = (uplink_energy(p + step, bits, h, &radio) - uplink_energy(p - step, bits, h, &radio)) / (2.0 * step);
        prop_assert!(slope > 0.0);
    }

    #[test]
    fn queues_stay_nonnegative(
        start in prop::collection::vec(0.0f64..5.0, 1..10),
        beta_seed in 0u64..1000,
        delay in 0.0f64..10.0,
        d_avg in 0.1f64..10.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(beta_seed);
        let u = start.len();
        let q = VirtualQueues { q_fa: start, q_de: rand::Rng::random_range(&mut rng, 0.0..3.0) };
        let assigned: Vec<bool> = (0..u).map(|_| rand::Rng::random_bool(&mut rng, 0.5)).collect();
        let beta: Vec<f64> = (0..u).map(|_| rand::Rng::random_range(&mut rng, 0.0..=1.0)).collect();
        let next = update_queues(&q, &assigned, &beta, delay, d_avg);
        for i in 0..u {
            let want = (q.q_fa[i] + if assigned[i] { 1.0 } else { 0.0 } - beta[i]).max(0.0);
            prop_assert_eq!(next.q_fa[i], want);
        }
        prop_assert_eq!(next.q_de, (q.q_de + delay - d_avg).max(0.0));
    }
}

#[test]
fn every_decision_satisfies_the_constraints() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for inst in 0..300 {
        let clients = 1 + inst % 7;
        let channels = 1 + inst % 4;
        let q_de = if inst % 3 == 0 {
            0.0
        } else {
            rand::Rng::random_range(&mut rng, 0.1..100.0)
        };
        let problem = random_problem(clients, channels, q_de, &mut rng);
        let cfg = SchedulerConfig {
            e_max: rand::Rng::random_range(&mut rng, 0.2..10.0),
            ..SchedulerConfig::default()
        };
        let d = schedule_round(&problem, &cfg).unwrap();
        check_constraints(&problem, &d.assignments, &cfg).unwrap();
        assert!(d.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        assert!(d.objective_trace.len() <= cfg.max_iterations + 1);
        for policy in [Policy::Random, Policy::RoundRobin, Policy::DelayMin] {
            let mut cursor = RoundRobinCursor::default();
            let b = baseline_schedule(policy, &problem, &cfg, clients, &mut cursor, &mut rng).unwrap();
            check_constraints(&problem, &b.assignments, &cfg).unwrap();
            assert!(
                b.assignments.iter().all(|a| a.s == 1.0),
                "{policy} must send dense updates"
            );
        }
    }
}
