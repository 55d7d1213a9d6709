//! Sparsification rates for a fixed assignment.
//!
//! With the round deadline `D` as the free variable, every client takes the
//! largest rate whose delay fits under `D`, and the objective becomes
//!
//! ```text
//! f(D) = Q_de * D - lambda * sum_k p_k * s_k(D)
//! ```
//!
//! Each `s_k(D)` is concave and nondecreasing, so `f` is convex. The solver
//! evaluates `f` at every kink and refines by golden-section search; the
//! client whose delay equals `D` at the optimum is the straggler.

use super::power::power_floor;
use super::{Link, RoundProblem, SchedulerConfig};
use crate::error::{Error, Result};
use crate::wireless::{link_rate, RadioParams};

const GOLDEN_STEPS: usize = 160;
const INVERSE_STEPS: usize = 200;

/// Uplink capacity of one client as a function of its time budget.
#[derive(Debug, Clone, Copy)]
struct RateCurve {
    fixed_delay: f64,
    dim: f64,
    /// Time up to which `full_rate` is affordable.
    t_full: f64,
    /// Time beyond which no further bits fit in the energy budget.
    t_end: f64,
    full_rate: f64,
    /// `Some` when power falls as time grows to keep energy at the cap.
    adaptive: Option<Adaptive>,
}

#[derive(Debug, Clone, Copy)]
struct Adaptive {
    budget: f64,
    gain: f64,
}

impl RateCurve {
    fn bits_within(&self, t: f64, radio: &RadioParams) -> f64 {
        if !(t > 0.0) {
            return 0.0;
        }
        let t = t.min(self.t_end);
        match self.adaptive {
            Some(a) if t > self.t_full => t * link_rate(a.budget / t, a.gain, radio.interference_w, radio),
            _ => t * self.full_rate,
        }
    }

    fn rate_at(&self, deadline: f64, radio: &RadioParams) -> f64 {
        let bits = self.bits_within(deadline - self.fixed_delay, radio);
        ((bits - self.dim) / (32.0 * self.dim)).min(1.0)
    }

    fn top_rate(&self, radio: &RadioParams) -> f64 {
        self.rate_at(self.fixed_delay + self.t_end, radio)
    }

    /// Smallest deadline at which rate `s` fits.
    fn deadline(&self, s: f64, radio: &RadioParams) -> f64 {
        let bits = 32.0 * s * self.dim + self.dim;
        let t = if bits <= self.t_full * self.full_rate || self.adaptive.is_none() {
            bits / self.full_rate
        } else {
            let (mut lo, mut hi) = (self.t_full, self.t_end);
            for _ in 0..INVERSE_STEPS {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if self.bits_within(mid, radio) >= bits {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            hi
        };
        self.fixed_delay + t
    }

    fn kinks(&self) -> [f64; 2] {
        [self.fixed_delay + self.t_full, self.fixed_delay + self.t_end]
    }
}

fn fixed_power_curve(problem: &RoundProblem, link: Link, power: f64, budget: f64) -> RateCurve {
    let radio = &problem.radio;
    let gain = problem.candidates[link.candidate].uplink_gains[link.channel];
    let t = budget / power;
    RateCurve {
        fixed_delay: problem.fixed_delay(link.candidate),
        dim: problem.payload_dim as f64,
        t_full: t,
        t_end: t,
        full_rate: link_rate(power, gain, radio.interference_w, radio),
        adaptive: None,
    }
}

fn adaptive_curve(problem: &RoundProblem, link: Link, budget: f64) -> RateCurve {
    let radio = &problem.radio;
    let gain = problem.candidates[link.candidate].uplink_gains[link.channel];
    RateCurve {
        fixed_delay: problem.fixed_delay(link.candidate),
        dim: problem.payload_dim as f64,
        t_full: budget / radio.max_power_w,
        t_end: budget / power_floor(radio),
        full_rate: link_rate(radio.max_power_w, gain, radio.interference_w, radio),
        adaptive: Some(Adaptive { budget, gain }),
    }
}

/// Largest rate the link can carry with transmit power `min(P_max, P_th(s))`.
pub fn max_feasible_rate(problem: &RoundProblem, link: Link, cfg: &SchedulerConfig) -> Option<f64> {
    let budget = problem.upload_energy(link.candidate, cfg);
    if budget <= 0.0 {
        return None;
    }
    let top = adaptive_curve(problem, link, budget).top_rate(&problem.radio);
    (top >= cfg.s_th).then_some(top)
}

fn solve(problem: &RoundProblem, links: &[Link], curves: &[RateCurve], cfg: &SchedulerConfig) -> Result<Vec<f64>> {
    let radio = &problem.radio;
    let tops: Vec<f64> = curves.iter().map(|c| c.top_rate(radio)).collect();
    if tops.iter().any(|&t| !(t >= cfg.s_th)) {
        return Err(Error::Infeasible);
    }
    let weights: Vec<f64> = links
        .iter()
        .map(|l| cfg.lambda * problem.candidates[l.candidate].weight)
        .collect();
    let lo = curves
        .iter()
        .map(|c| c.deadline(cfg.s_th, radio))
        .fold(f64::NEG_INFINITY, f64::max);
    let ends: Vec<f64> = curves.iter().zip(&tops).map(|(c, &t)| c.deadline(t, radio)).collect();
    let hi = ends.iter().cloned().fold(lo, f64::max);
    let rates_at = |d: f64| -> Vec<f64> {
        curves
            .iter()
            .zip(tops.iter().zip(&ends))
            .map(|(c, (&t, &end))| {
                if d >= end {
                    t
                } else {
                    c.rate_at(d, radio).clamp(cfg.s_th, t)
                }
            })
            .collect()
    };
    let f = |d: f64| -> f64 {
        let gain: f64 = rates_at(d).iter().zip(&weights).map(|(s, w)| s * w).sum();
        problem.q_de * d - gain
    };

    let mut points = vec![lo, hi];
    for (c, &end) in curves.iter().zip(&ends) {
        points.extend(c.kinks().into_iter().filter(|&k| k > lo && k < hi));
        if end > lo && end < hi {
            points.push(end);
        }
    }
    if problem.q_de > 0.0 && hi > lo {
        points.push(golden_section(&f, lo, hi));
    }
    points.sort_by(f64::total_cmp);
    let mut best = (f(points[0]), points[0]);
    for &d in &points[1..] {
        let v = f(d);
        if v < best.0 {
            best = (v, d);
        }
    }
    Ok(rates_at(best.1))
}

fn golden_section(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..GOLDEN_STEPS {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        c
    } else {
        d
    }
}

fn budgets(problem: &RoundProblem, links: &[Link], cfg: &SchedulerConfig) -> Result<Vec<f64>> {
    links
        .iter()
        .map(|l| {
            let b = problem.upload_energy(l.candidate, cfg);
            if b > 0.0 {
                Ok(b)
            } else {
                Err(Error::EnergyInfeasible {
                    client: problem.candidates[l.candidate].client,
                    reason: format!("computation alone exceeds E_max by {} J", -b),
                })
            }
        })
        .collect()
}

/// Rates minimizing the objective when each client's power is fixed.
pub fn optimal_sparsification_fixed_power(
    problem: &RoundProblem,
    links: &[Link],
    powers: &[f64],
    cfg: &SchedulerConfig,
) -> Result<Vec<f64>> {
    if links.is_empty() {
        return Ok(Vec::new());
    }
    let budgets = budgets(problem, links, cfg)?;
    let curves: Vec<RateCurve> = links
        .iter()
        .zip(powers.iter().zip(&budgets))
        .map(|(&l, (&p, &b))| fixed_power_curve(problem, l, p, b))
        .collect();
    solve(problem, links, &curves, cfg)
}

/// Rates minimizing the objective when each client transmits at
/// `min(P_max, P_th(s))`.
pub fn optimal_sparsification(problem: &RoundProblem, links: &[Link], cfg: &SchedulerConfig) -> Result<Vec<f64>> {
    if links.is_empty() {
        return Ok(Vec::new());
    }
    let budgets = budgets(problem, links, cfg)?;
    let curves: Vec<RateCurve> = links
        .iter()
        .zip(&budgets)
        .map(|(&l, &b)| adaptive_curve(problem, l, b))
        .collect();
    solve(problem, links, &curves, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::testutil::random_problem;
    use crate::scheduler::{optimal_power, ScheduleDecision};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn links(n: usize) -> Vec<Link> {
        (0..n)
            .map(|k| Link {
                candidate: k,
                channel: k,
            })
            .collect()
    }

    #[test]
    fn no_delay_pressure_means_dense_updates() {
        let cfg = SchedulerConfig::default();
        for seed in 0..20 {
            let p = random_problem(3, 3, 0.0, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(optimal_sparsification(&p, &links(3), &cfg).unwrap(), vec![1.0; 3]);
        }
    }

    #[test]
    fn cheap_delay_keeps_the_straggler_dense() {
        // Price of delay far below lambda * p_i per unit rate.
        let cfg = SchedulerConfig::default();
        let p = random_problem(2, 2, 1e-9, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(optimal_sparsification(&p, &links(2), &cfg).unwrap(), vec![1.0; 2]);
    }

    #[test]
    fn heavy_delay_pressure_sparsifies() {
        let cfg = SchedulerConfig::default();
        let p = random_problem(3, 3, 1e4, &mut ChaCha8Rng::seed_from_u64(3));
        let s = optimal_sparsification(&p, &links(3), &cfg).unwrap();
        assert!(s.iter().all(|&x| x < 1.0), "{s:?}");
        assert!(s.iter().all(|&x| x >= cfg.s_th));
    }

    // Dense scan over deadlines; the solver must not be beaten.
    #[test]
    fn solver_beats_deadline_scan() {
        let cfg = SchedulerConfig {
            e_max: 2.0,
            ..SchedulerConfig::default()
        };
        for seed in 0..40 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q_de = rng.random_range(0.5..200.0);
            let p = random_problem(3, 3, q_de, &mut rng);
            let l = links(3);
            let Ok(s) = optimal_sparsification(&p, &l, &cfg) else {
                continue;
            };
            let pw = optimal_power(&p, &l, &s, &cfg).unwrap();
            let v = ScheduleDecision::from_parts(&p, &l, &s, &pw, &cfg).unwrap().objective;
            for i in 0..=200 {
                let s1 = cfg.s_th + (1.0 - cfg.s_th) * i as f64 / 200.0;
                let trial = vec![s1; 3];
                let Ok(pw) = optimal_power(&p, &l, &trial, &cfg) else {
                    continue;
                };
                let other = ScheduleDecision::from_parts(&p, &l, &trial, &pw, &cfg).unwrap();
                assert!(v <= other.objective + 1e-9, "seed {seed}");
            }
        }
    }
}
