//! Reference scheduling policies with dense updates.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::power::threshold_power;
use super::{schedule_round, Link, RoundProblem, ScheduleDecision, SchedulerConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Policy {
    DpSparFl,
    Random,
    RoundRobin,
    DelayMin,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::DpSparFl, Policy::Random, Policy::RoundRobin, Policy::DelayMin];

    pub fn name(self) -> &'static str {
        match self {
            Policy::DpSparFl => "dp_sparfl",
            Policy::Random => "random",
            Policy::RoundRobin => "round_robin",
            Policy::DelayMin => "delay_min",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown policy `{s}`")))
    }
}

/// Next group visited by round robin.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RoundRobinCursor {
    pub next_group: usize,
}

/// Dense rate with the largest energy-feasible power; infeasible pairs drop out.
fn dense(problem: &RoundProblem, links: &[Link], cfg: &SchedulerConfig) -> Result<ScheduleDecision> {
    let bits = problem.uplink_bits(1.0);
    let mut kept = Vec::new();
    let mut powers = Vec::new();
    for &l in links {
        let gain = problem.candidates[l.candidate].uplink_gains[l.channel];
        let budget = problem.upload_energy(l.candidate, cfg);
        if let Some(p) = threshold_power(bits, gain, budget, &problem.radio) {
            kept.push(l);
            powers.push(p);
        }
    }
    let rates = vec![1.0; kept.len()];
    ScheduleDecision::from_parts(problem, &kept, &rates, &powers, cfg)
}

fn random_links<R: Rng + ?Sized>(problem: &RoundProblem, rng: &mut R) -> Vec<Link> {
    let k = problem.channels.min(problem.candidates.len());
    let picked = index::sample(rng, problem.candidates.len(), k);
    let mut channels: Vec<usize> = (0..problem.channels).collect();
    channels.shuffle(rng);
    picked
        .iter()
        .zip(channels)
        .map(|(candidate, channel)| Link { candidate, channel })
        .collect()
}

fn round_robin_links(problem: &RoundProblem, num_clients: usize, cursor: &mut RoundRobinCursor) -> Vec<Link> {
    let n = problem.channels;
    let groups = num_clients.div_ceil(n).max(1);
    for step in 0..groups {
        let g = (cursor.next_group + step) % groups;
        let members: Vec<usize> = (0..problem.candidates.len())
            .filter(|&k| problem.candidates[k].client / n == g)
            .collect();
        if !members.is_empty() {
            cursor.next_group = (g + 1) % groups;
            return members
                .into_iter()
                .enumerate()
                .map(|(channel, candidate)| Link { candidate, channel })
                .collect();
        }
    }
    Vec::new()
}

fn delay_min_links(problem: &RoundProblem, cfg: &SchedulerConfig) -> Vec<Link> {
    let bits = problem.uplink_bits(1.0);
    let p_max = problem.radio.max_power_w;
    let mut pairs = Vec::new();
    for k in 0..problem.candidates.len() {
        let budget = problem.upload_energy(k, cfg);
        for j in 0..problem.channels {
            let gain = problem.candidates[k].uplink_gains[j];
            if threshold_power(bits, gain, budget, &problem.radio).is_some() {
                pairs.push((problem.costs(k, j, 1.0, p_max).delay(), k, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_k = vec![false; problem.candidates.len()];
    let mut used_j = vec![false; problem.channels];
    let mut links = Vec::new();
    for (_, k, j) in pairs {
        if !used_k[k] && !used_j[j] {
            used_k[k] = true;
            used_j[j] = true;
            links.push(Link {
                candidate: k,
                channel: j,
            });
        }
    }
    links
}

/// Schedules one round under `policy`; `num_clients` is the size of the
/// original population (round-robin groups are fixed by client id).
pub fn baseline_schedule<R: Rng + ?Sized>(
    policy: Policy,
    problem: &RoundProblem,
    cfg: &SchedulerConfig,
    num_clients: usize,
    cursor: &mut RoundRobinCursor,
    rng: &mut R,
) -> Result<ScheduleDecision> {
    problem.validate()?;
    if problem.candidates.is_empty() {
        return Err(Error::EmptyRound);
    }
    let links = match policy {
        Policy::DpSparFl => return schedule_round(problem, cfg),
        Policy::Random => random_links(problem, rng),
        Policy::RoundRobin => round_robin_links(problem, num_clients, cursor),
        Policy::DelayMin => delay_min_links(problem, cfg),
    };
    dense(problem, &links, cfg)
}
