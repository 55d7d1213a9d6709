//! Channel assignment for given rates.
//!
//! Linear costs are `Q_fa[i] - lambda p_i s_i`. Without delay pressure a single
//! matching solves the problem. Otherwise the round delay is bounded by a
//! threshold `D` taken from the edge delays: edges slower than `D` are pruned,
//! the matching is solved, and the threshold giving the smallest objective
//! wins. Every matching has the largest cardinality the feasible edges allow.

use super::hungarian::min_cost_matching;
use super::power::threshold_power;
use super::sparsify::max_feasible_rate;
use super::{Assignment, Link, RoundProblem, SchedulerConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Edge {
    s: f64,
    power: f64,
    delay: f64,
    cost: f64,
}

fn edges(problem: &RoundProblem, rates: &[f64], cfg: &SchedulerConfig) -> Vec<Vec<Option<Edge>>> {
    (0..problem.candidates.len())
        .map(|k| {
            let c = &problem.candidates[k];
            let budget = problem.upload_energy(k, cfg);
            (0..problem.channels)
                .map(|j| {
                    let link = Link {
                        candidate: k,
                        channel: j,
                    };
                    let top = max_feasible_rate(problem, link, cfg)?;
                    let s = rates[k].clamp(cfg.s_th, top);
                    let power = threshold_power(problem.uplink_bits(s), c.uplink_gains[j], budget, &problem.radio)?;
                    Some(Edge {
                        s,
                        power,
                        delay: problem.costs(k, j, s, power).delay(),
                        cost: c.q_fa - cfg.lambda * c.weight * s,
                    })
                })
                .collect()
        })
        .collect()
}

fn matching(table: &[Vec<Option<Edge>>], limit: f64) -> Vec<Link> {
    let cost: Vec<Vec<Option<f64>>> = table
        .iter()
        .map(|row| {
            row.iter()
                .map(|e| e.filter(|e| e.delay <= limit).map(|e| e.cost))
                .collect()
        })
        .collect();
    min_cost_matching(&cost)
        .into_iter()
        .enumerate()
        .filter_map(|(k, j)| j.map(|channel| Link { candidate: k, channel }))
        .collect()
}

fn value(problem: &RoundProblem, table: &[Vec<Option<Edge>>], links: &[Link], cfg: &SchedulerConfig) -> f64 {
    let mut linear = 0.0;
    let mut delay: f64 = 0.0;
    for l in links {
        let e = table[l.candidate][l.channel].expect("matched edges exist");
        linear += e.cost;
        delay = delay.max(e.delay);
    }
    linear + problem.q_de * (delay - cfg.d_avg) + problem.fairness_offset()
}

/// Matchings for every useful delay threshold, best first, without duplicates.
///
/// `rates[k]` is the rate candidate `k` would use, capped per link by what
/// its energy budget allows.
pub fn assignment_candidates(problem: &RoundProblem, rates: &[f64], cfg: &SchedulerConfig) -> Result<Vec<Vec<Link>>> {
    Ok(ranked(problem, rates, cfg)?.into_iter().map(|(_, l)| l).collect())
}

fn ranked(problem: &RoundProblem, rates: &[f64], cfg: &SchedulerConfig) -> Result<Vec<(f64, Vec<Link>)>> {
    if problem.candidates.is_empty() {
        return Err(Error::EmptyRound);
    }
    let table = edges(problem, rates, cfg);
    let full = matching(&table, f64::INFINITY);
    if full.is_empty() {
        return Err(Error::EmptyRound);
    }
    if problem.q_de <= 0.0 {
        return Ok(vec![(value(problem, &table, &full, cfg), full)]);
    }
    let mut limits: Vec<f64> = table.iter().flatten().flatten().map(|e| e.delay).collect();
    limits.sort_by(f64::total_cmp);
    limits.dedup();
    let mut out: Vec<(f64, Vec<Link>)> = Vec::new();
    for &limit in &limits {
        let m = matching(&table, limit);
        if m.len() < full.len() || out.iter().any(|(_, seen)| *seen == m) {
            continue;
        }
        out.push((value(problem, &table, &m, cfg), m));
    }
    // Stable, so equal values keep the smaller threshold first.
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

/// The matching minimizing the objective for the given rates.
pub fn optimal_assignment(problem: &RoundProblem, rates: &[f64], cfg: &SchedulerConfig) -> Result<Vec<Assignment>> {
    let table = edges(problem, rates, cfg);
    let (_, best) = ranked(problem, rates, cfg)?.swap_remove(0);
    Ok(best
        .into_iter()
        .map(|l| {
            let e = table[l.candidate][l.channel].expect("matched edges exist");
            Assignment {
                candidate: l.candidate,
                client: problem.candidates[l.candidate].client,
                channel: l.channel,
                s: e.s,
                power: e.power,
                costs: problem.costs(l.candidate, l.channel, e.s, e.power),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::drift_penalty_value;
    use crate::scheduler::testutil::random_problem;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // All injective partial maps of candidates onto channels.
    fn enumerate(
        k: usize,
        n: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        out: &mut Vec<Vec<Option<usize>>>,
    ) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        cur.push(None);
        enumerate(k, n, used, cur, out);
        cur.pop();
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                cur.push(Some(j));
                enumerate(k, n, used, cur, out);
                cur.pop();
                used[j] = false;
            }
        }
    }

    #[test]
    fn single_client_single_channel() {
        let p = random_problem(1, 1, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        let a = optimal_assignment(&p, &[1.0], &SchedulerConfig::default()).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!((a[0].candidate, a[0].channel), (0, 0));
    }

    #[test]
    fn matches_enumeration_with_and_without_delay_pressure() {
        let cfg = SchedulerConfig {
            d_avg: 2.0,
            ..SchedulerConfig::default()
        };
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q_de = if seed % 2 == 0 {
                0.0
            } else {
                rng.random_range(0.1..20.0)
            };
            let p = random_problem(4, 3, q_de, &mut rng);
            let rates: Vec<f64> = (0..4).map(|_| rng.random_range(0.05..1.0)).collect();
            let got = optimal_assignment(&p, &rates, &cfg).unwrap();
            let got_v = drift_penalty_value(&p, &got, &cfg).unwrap();

            let mut all = Vec::new();
            enumerate(4, 3, &mut vec![false; 3], &mut Vec::new(), &mut all);
            let mut best = f64::INFINITY;
            for m in all.iter().filter(|m| m.iter().flatten().count() == 3) {
                let cand: Vec<Assignment> = m
                    .iter()
                    .enumerate()
                    .filter_map(|(k, j)| j.map(|j| (k, j)))
                    .map(|(k, j)| {
                        let s = rates[k];
                        let power = threshold_power(
                            p.uplink_bits(s),
                            p.candidates[k].uplink_gains[j],
                            p.upload_energy(k, &cfg),
                            &p.radio,
                        )
                        .unwrap();
                        Assignment {
                            candidate: k,
                            client: k,
                            channel: j,
                            s,
                            power,
                            costs: p.costs(k, j, s, power),
                        }
                    })
                    .collect();
                best = best.min(drift_penalty_value(&p, &cand, &cfg).unwrap());
            }
            assert!((got_v - best).abs() < 1e-9, "seed {seed}: {got_v} vs {best}");
        }
    }

    #[test]
    fn energy_violating_edges_are_never_used() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = random_problem(3, 2, 0.0, &mut rng);
        // Client 0 computes more than the cap allows.
        p.candidates[0].samples = 10_000_000;
        let cfg = SchedulerConfig::default();
        let a = optimal_assignment(&p, &[1.0; 3], &cfg).unwrap();
        assert!(a.iter().all(|x| x.candidate != 0));
        assert_eq!(a.len(), 2);
    }
}
