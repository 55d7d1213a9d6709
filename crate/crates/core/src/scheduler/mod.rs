//! Drift-plus-penalty scheduling of clients, channels, rates and powers.
//!
//! Per round the controller minimizes
//!
//! ```text
//! V = sum_assigned (Q_fa[i] - lambda p_i s_i) + Q_de (d - d_avg) - sum_i Q_fa[i] beta_i
//! ```
//!
//! where `d` is the largest delay among assigned clients, subject to one
//! channel per client, one client per channel, `s_th <= s <= 1`,
//! `0 < P <= P_max` and the per-round energy cap.

pub mod assignment;
pub mod baseline;
pub mod hungarian;
pub mod power;
pub mod sparsify;

use crate::error::{invalid, Error, Result};
use crate::wireless::{
    downlink_bits, expected_payload_bits, round_costs, ClientLink, ComputeParams, LinkCosts, RadioParams,
};

pub use assignment::{assignment_candidates, optimal_assignment};
pub use baseline::{baseline_schedule, Policy, RoundRobinCursor};
pub use power::{optimal_power, threshold_power};
pub use sparsify::{optimal_sparsification, optimal_sparsification_fixed_power};

/// Slack allowed when checking the energy cap.
pub const ENERGY_TOLERANCE_J: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerConfig {
    pub lambda: f64,
    pub d_avg: f64,
    pub e_max: f64,
    pub s_th: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            lambda: 50.0,
            d_avg: 1.0,
            e_max: 10.0,
            s_th: 0.05,
            tolerance: 1e-6,
            max_iterations: 50,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(invalid("lambda", format!("{} must be > 0", self.lambda)));
        }
        if !(self.d_avg > 0.0) || !self.d_avg.is_finite() {
            return Err(invalid("d_avg", format!("{} must be > 0", self.d_avg)));
        }
        if !(self.e_max > 0.0) || !self.e_max.is_finite() {
            return Err(invalid("e_max", format!("{} must be > 0", self.e_max)));
        }
        if !(self.s_th > 0.0 && self.s_th <= 1.0) {
            return Err(invalid("s_th", format!("{} not in (0, 1]", self.s_th)));
        }
        if !(self.tolerance >= 0.0) || self.max_iterations == 0 {
            return Err(invalid("tolerance", "needs tolerance >= 0 and at least one iteration"));
        }
        Ok(())
    }
}

/// Fairness queues (one per client) and the delay queue.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualQueues {
    pub q_fa: Vec<f64>,
    pub q_de: f64,
}

impl VirtualQueues {
    pub fn new(clients: usize) -> Self {
        Self {
            q_fa: vec![0.0; clients],
            q_de: 0.0,
        }
    }

    pub fn max_q_fa(&self) -> f64 {
        self.q_fa.iter().cloned().fold(0.0, f64::max)
    }
}

/// `Q_fa[i] <- [Q_fa[i] + 1{assigned} - beta_i]^+`, `Q_de <- [Q_de + d - d_avg]^+`.
pub fn update_queues(
    q: &VirtualQueues,
    assigned: &[bool],
    beta: &[f64],
    round_delay: f64,
    d_avg: f64,
) -> VirtualQueues {
    let q_fa = q
        .q_fa
        .iter()
        .zip(assigned)
        .zip(beta)
        .map(|((&f, &a), &b)| (f + if a { 1.0 } else { 0.0 } - b).max(0.0))
        .collect();
    VirtualQueues {
        q_fa,
        q_de: (q.q_de + round_delay - d_avg).max(0.0),
    }
}

/// A client that may be scheduled this round.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub client: usize,
    pub weight: f64,
    pub q_fa: f64,
    pub beta: f64,
    pub samples: usize,
    pub compute: ComputeParams,
    pub uplink_gains: Vec<f64>,
    pub downlink_gain: f64,
}

/// Everything the controller sees in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundProblem {
    pub candidates: Vec<Candidate>,
    pub channels: usize,
    pub q_de: f64,
    pub radio: RadioParams,
    pub tau: usize,
    /// Parameter count used for payload sizes.
    pub payload_dim: usize,
}

impl RoundProblem {
    pub fn link(&self, k: usize, channel: usize) -> ClientLink {
        let c = &self.candidates[k];
        ClientLink {
            samples: c.samples,
            uplink_gain: c.uplink_gains[channel],
            downlink_gain: c.downlink_gain,
            compute: c.compute,
        }
    }

    pub fn uplink_bits(&self, s: f64) -> f64 {
        expected_payload_bits(self.payload_dim, s)
    }

    pub fn costs(&self, k: usize, channel: usize, s: f64, power: f64) -> LinkCosts {
        round_costs(
            &self.link(k, channel),
            power,
            self.uplink_bits(s),
            downlink_bits(self.payload_dim),
            self.tau,
            &self.radio,
        )
    }

    /// Energy left for the upload after local computation.
    pub fn upload_energy(&self, k: usize, cfg: &SchedulerConfig) -> f64 {
        let c = &self.candidates[k];
        cfg.e_max - c.compute.cpu_energy(self.tau, c.samples)
    }

    /// Downlink plus local computation delay; independent of the channel and rate.
    pub fn fixed_delay(&self, k: usize) -> f64 {
        let c = self.costs(k, 0, 0.0, self.radio.max_power_w);
        c.d_do + c.d_lo
    }

    /// `-sum_i Q_fa[i] beta_i`.
    pub fn fairness_offset(&self) -> f64 {
        -self.candidates.iter().map(|c| c.q_fa * c.beta).sum::<f64>()
    }

    pub fn validate(&self) -> Result<()> {
        self.radio.validate()?;
        if self.channels == 0 {
            return Err(invalid("channels", "must be >= 1"));
        }
        if self.payload_dim == 0 || self.tau == 0 {
            return Err(invalid("payload_dim", "payload dimension and tau must be >= 1"));
        }
        for c in &self.candidates {
            c.compute.validate()?;
            if c.uplink_gains.len() != self.channels {
                return Err(Error::Shape(format!(
                    "client {} has {} channel gains for {} channels",
                    c.client,
                    c.uplink_gains.len(),
                    self.channels
                )));
            }
            if c.uplink_gains.iter().chain([&c.downlink_gain]).any(|g| !(*g > 0.0)) {
                return Err(invalid("gain", format!("client {} has a non-positive gain", c.client)));
            }
        }
        Ok(())
    }
}

/// A candidate placed on a channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Link {
    pub candidate: usize,
    pub channel: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub candidate: usize,
    pub client: usize,
    pub channel: usize,
    pub s: f64,
    pub power: f64,
    pub costs: LinkCosts,
}

impl Assignment {
    pub fn link(&self) -> Link {
        Link {
            candidate: self.candidate,
            channel: self.channel,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleDecision {
    pub assignments: Vec<Assignment>,
    pub round_delay: f64,
    pub objective: f64,
    /// Objective after each accepted iteration of the coordinate loop.
    pub objective_trace: Vec<f64>,
}

impl ScheduleDecision {
    pub fn empty(problem: &RoundProblem) -> Self {
        let objective = problem.fairness_offset();
        Self {
            assignments: Vec::new(),
            round_delay: 0.0,
            objective,
            objective_trace: vec![objective],
        }
    }

    /// Builds a decision from chosen rates and powers.
    pub fn from_parts(
        problem: &RoundProblem,
        links: &[Link],
        rates: &[f64],
        powers: &[f64],
        cfg: &SchedulerConfig,
    ) -> Result<Self> {
        let assignments: Vec<Assignment> = links
            .iter()
            .zip(rates.iter().zip(powers))
            .map(|(l, (&s, &p))| Assignment {
                candidate: l.candidate,
                client: problem.candidates[l.candidate].client,
                channel: l.channel,
                s,
                power: p,
                costs: problem.costs(l.candidate, l.channel, s, p),
            })
            .collect();
        let objective = drift_penalty_value(problem, &assignments, cfg)?;
        Ok(Self {
            round_delay: assignments.iter().map(|a| a.costs.delay()).fold(0.0, f64::max),
            assignments,
            objective,
            objective_trace: vec![objective],
        })
    }

    pub fn participants(&self) -> usize {
        self.assignments.len()
    }

    pub fn mean_s(&self) -> f64 {
        if self.assignments.is_empty() {
            0.0
        } else {
            self.assignments.iter().map(|a| a.s).sum::<f64>() / self.assignments.len() as f64
        }
    }

    pub fn links(&self) -> Vec<Link> {
        self.assignments.iter().map(Assignment::link).collect()
    }
}

/// Checks one-to-one matching, rate and power ranges and the energy cap.
pub fn check_constraints(problem: &RoundProblem, assignments: &[Assignment], cfg: &SchedulerConfig) -> Result<()> {
    let mut used_client = vec![false; problem.candidates.len()];
    let mut used_channel = vec![false; problem.channels];
    for a in assignments {
        if a.candidate >= problem.candidates.len() || a.channel >= problem.channels {
            return Err(Error::Contract {
                constraint: "link range",
                detail: format!("link ({}, {}) out of range", a.candidate, a.channel),
            });
        }
        if std::mem::replace(&mut used_client[a.candidate], true) {
            return Err(Error::Contract {
                constraint: "one channel per client",
                detail: format!("client {} holds two channels", a.client),
            });
        }
        if std::mem::replace(&mut used_channel[a.channel], true) {
            return Err(Error::Contract {
                constraint: "one client per channel",
                detail: format!("channel {} is shared", a.channel),
            });
        }
        if !(a.s >= cfg.s_th && a.s <= 1.0) {
            return Err(Error::Contract {
                constraint: "rate range",
                detail: format!("client {} rate {}", a.client, a.s),
            });
        }
        if !(a.power > 0.0 && a.power <= problem.radio.max_power_w) {
            return Err(Error::Contract {
                constraint: "power range",
                detail: format!("client {} power {}", a.client, a.power),
            });
        }
        let energy = problem.costs(a.candidate, a.channel, a.s, a.power).energy();
        if !(energy <= cfg.e_max + ENERGY_TOLERANCE_J) {
            return Err(Error::Contract {
                constraint: "energy cap",
                detail: format!("client {} energy {energy} J", a.client),
            });
        }
    }
    Ok(())
}

/// The per-round objective `V` of a feasible decision.
pub fn drift_penalty_value(problem: &RoundProblem, assignments: &[Assignment], cfg: &SchedulerConfig) -> Result<f64> {
    check_constraints(problem, assignments, cfg)?;
    let mut linear = 0.0;
    let mut delay: f64 = 0.0;
    for a in assignments {
        let c = &problem.candidates[a.candidate];
        linear += c.q_fa - cfg.lambda * c.weight * a.s;
        delay = delay.max(problem.costs(a.candidate, a.channel, a.s, a.power).delay());
    }
    let delay_term = if assignments.is_empty() {
        0.0
    } else {
        problem.q_de * (delay - cfg.d_avg)
    };
    Ok(linear + delay_term + problem.fairness_offset())
}

/// Exact rates and powers for a fixed assignment, falling back to `s_th`.
pub fn solve_given_assignment(
    problem: &RoundProblem,
    links: &[Link],
    cfg: &SchedulerConfig,
) -> Result<ScheduleDecision> {
    let rates = match optimal_sparsification(problem, links, cfg) {
        Ok(r) => r,
        Err(Error::Infeasible) => vec![cfg.s_th; links.len()],
        Err(e) => return Err(e),
    };
    let powers = optimal_power(problem, links, &rates, cfg)?;
    ScheduleDecision::from_parts(problem, links, &rates, &powers, cfg)
}

/// Alternates channel assignment with the rate and power solvers until the
/// objective stops decreasing by more than the tolerance.
pub fn schedule_round(problem: &RoundProblem, cfg: &SchedulerConfig) -> Result<ScheduleDecision> {
    cfg.validate()?;
    problem.validate()?;
    if problem.candidates.is_empty() {
        return Err(Error::EmptyRound);
    }
    let mut reference = vec![1.0; problem.candidates.len()];
    let mut best: Option<ScheduleDecision> = None;
    let mut trace = Vec::new();
    for _ in 0..cfg.max_iterations {
        let mut improved = None;
        for links in assignment_candidates(problem, &reference, cfg)? {
            let decision = match solve_given_assignment(problem, &links, cfg) {
                Ok(d) => d,
                Err(Error::EnergyInfeasible { .. }) => continue,
                Err(e) => return Err(e),
            };
            let beats_round = improved
                .as_ref()
                .is_none_or(|d: &ScheduleDecision| decision.objective < d.objective);
            if beats_round {
                improved = Some(decision);
            }
        }
        let Some(next) = improved else { break };
        let accept = match &best {
            None => true,
            Some(cur) => next.objective < cur.objective - cfg.tolerance,
        };
        if !accept {
            break;
        }
        trace.push(next.objective);
        reference = vec![1.0; problem.candidates.len()];
        for a in &next.assignments {
            reference[a.candidate] = a.s;
        }
        best = Some(next);
    }
    let mut decision = best.ok_or(Error::EmptyRound)?;
    decision.objective_trace = trace;
    Ok(decision)
}

#[cfg(test)]
pub(crate) mod testutil {
    pub use crate::oracle::random_problem;
}
