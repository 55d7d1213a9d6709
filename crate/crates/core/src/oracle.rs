//! Slow reference computations used to check the fast solvers.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dpsgd::{ClipMode, DpConfig, TrainStreams};
use crate::error::Result;
use crate::model::{sample_loss_grad, Dataset, ModelWeights, Workspace};
use crate::scheduler::power::power_floor;
use crate::scheduler::{Candidate, Link, RoundProblem, SchedulerConfig};
use crate::wireless::{channel_gain, link_rate, ComputeParams, RadioParams};

fn ln_choose(n: u32, k: u32) -> f64 {
    (1..=k).map(|i| ((n - k + i) as f64).ln() - (i as f64).ln()).sum()
}

/// Log moment `ln E[(1 - q + q e^{(2z-1)/(2 sigma^2)})^alpha]` of the
/// subsampled Gaussian at an integer order, by binomial expansion.
pub fn binomial_rdp(q: f64, sigma_hat: f64, alpha: u32) -> f64 {
    let s2 = sigma_hat * sigma_hat;
    let terms: Vec<f64> = (0..=alpha)
        .map(|k| {
            let kf = k as f64;
            let keep = if alpha == k {
                0.0
            } else {
                (alpha - k) as f64 * (1.0 - q).ln()
            };
            ln_choose(alpha, k) + keep + kf * q.ln() + (kf * kf - kf) / (2.0 * s2)
        })
        .filter(|t| t.is_finite())
        .collect();
    let peak = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    peak + terms.iter().map(|t| (t - peak).exp()).sum::<f64>().ln()
}

/// `(cardinality, cost)` of the best matching found by trying every
/// injective partial map of rows onto columns: largest cardinality first,
/// then smallest cost.
pub fn exhaustive_matching(cost: &[Vec<Option<f64>>]) -> (usize, f64) {
    fn go(
        cost: &[Vec<Option<f64>>],
        row: usize,
        used: &mut Vec<bool>,
        size: usize,
        total: f64,
        best: &mut (usize, f64),
    ) {
        if row == cost.len() {
            if size > best.0 || (size == best.0 && total < best.1) {
                *best = (size, total);
            }
            return;
        }
        go(cost, row + 1, used, size, total, best);
        for (j, c) in cost[row].iter().enumerate() {
            if let Some(c) = c {
                if !used[j] {
                    used[j] = true;
                    go(cost, row + 1, used, size + 1, total + c, best);
                    used[j] = false;
                }
            }
        }
    }
    let cols = cost.iter().map(Vec::len).max().unwrap_or(0);
    let mut best = (0, 0.0);
    go(cost, 0, &mut vec![false; cols], 0, 0.0, &mut best);
    best
}

/// Cost of a matching given as `row -> column`.
pub fn matching_cost(cost: &[Vec<Option<f64>>], m: &[Option<usize>]) -> Option<(usize, f64)> {
    let mut size = 0;
    let mut total = 0.0;
    let mut used = Vec::new();
    for (i, j) in m.iter().enumerate() {
        if let Some(j) = *j {
            if used.contains(&j) {
                return None;
            }
            used.push(j);
            total += cost[i][j]?;
            size += 1;
        }
    }
    Some((size, total))
}

/// `min(P_max, P_th)` by bisection on `ln P`; `None` if the power floor overspends.
pub fn brute_threshold_power(bits: f64, gain: f64, budget_j: f64, radio: &RadioParams) -> Option<f64> {
    let energy = |p: f64| p * bits / link_rate(p, gain, radio.interference_w, radio);
    if !(budget_j > 0.0) {
        return None;
    }
    if energy(radio.max_power_w) <= budget_j {
        return Some(radio.max_power_w);
    }
    let (mut lo, mut hi) = (power_floor(radio).ln(), radio.max_power_w.ln());
    if energy(lo.exp()) > budget_j {
        return None;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if energy(mid.exp()) <= budget_j {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(lo.exp())
}

/// Delay of candidate `k` on `channel` at rate `s`, or `None` if unaffordable.
fn link_delay(p: &RoundProblem, k: usize, channel: usize, s: f64, cfg: &SchedulerConfig) -> Option<f64> {
    let gain = p.candidates[k].uplink_gains[channel];
    let power = brute_threshold_power(p.uplink_bits(s), gain, p.upload_energy(k, cfg), &p.radio)?;
    Some(p.costs(k, channel, s, power).delay())
}

/// Direct evaluation of the round objective from rates and delays.
pub fn objective(p: &RoundProblem, links: &[Link], rates: &[f64], delays: &[f64], cfg: &SchedulerConfig) -> f64 {
    let linear: f64 = links
        .iter()
        .zip(rates)
        .map(|(l, s)| {
            let c = &p.candidates[l.candidate];
            c.q_fa - cfg.lambda * c.weight * s
        })
        .sum();
    let d = delays.iter().cloned().fold(0.0, f64::max);
    let offset: f64 = p.candidates.iter().map(|c| c.q_fa * c.beta).sum();
    linear + p.q_de * (d - cfg.d_avg) - offset
}

/// Best objective over the rate grid `s_th, s_th + step, ..., 1` per link.
///
/// For a fixed largest delay each client independently takes its largest
/// grid rate fitting under it, so trying every grid delay as the largest one
/// covers the whole grid.
pub fn grid_sparsification(p: &RoundProblem, links: &[Link], cfg: &SchedulerConfig, step: f64) -> Option<f64> {
    let n = ((1.0 - cfg.s_th) / step).round() as usize;
    let grid: Vec<f64> = (0..=n).map(|i| (cfg.s_th + i as f64 * step).min(1.0)).collect();
    let tables: Vec<Vec<(f64, f64)>> = links
        .iter()
        .map(|l| {
            grid.iter()
                .filter_map(|&s| link_delay(p, l.candidate, l.channel, s, cfg).map(|d| (s, d)))
                .collect()
        })
        .collect();
    if tables.iter().any(Vec::is_empty) {
        return None;
    }
    let mut best = f64::INFINITY;
    for limit in tables.iter().flatten().map(|&(_, d)| d) {
        let mut rates = Vec::with_capacity(links.len());
        let mut delays = Vec::with_capacity(links.len());
        for t in &tables {
            let Some(&(s, d)) = t.iter().filter(|(_, d)| *d <= limit).max_by(|a, b| a.0.total_cmp(&b.0)) else {
                break;
            };
            rates.push(s);
            delays.push(d);
        }
        if rates.len() == links.len() {
            best = best.min(objective(p, links, &rates, &delays, cfg));
        }
    }
    best.is_finite().then_some(best)
}

/// Largest affordable rate of a link, or `None` if even `s_th` is not.
pub fn top_rate_of(p: &RoundProblem, l: Link, cfg: &SchedulerConfig) -> Option<f64> {
    let ok = |s: f64| link_delay(p, l.candidate, l.channel, s, cfg).is_some();
    if !ok(cfg.s_th) {
        return None;
    }
    if ok(1.0) {
        return Some(1.0);
    }
    let (mut lo, mut hi) = (cfg.s_th, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(lo)
}

/// Largest rate in `[s_th, top]` whose delay fits under `deadline`.
fn rate_under(p: &RoundProblem, l: Link, top: f64, deadline: f64, cfg: &SchedulerConfig) -> Option<(f64, f64)> {
    let delay = |s: f64| link_delay(p, l.candidate, l.channel, s, cfg).unwrap_or(f64::INFINITY);
    let d_top = delay(top);
    if d_top <= deadline {
        return Some((top, d_top));
    }
    if delay(cfg.s_th) > deadline {
        return None;
    }
    let (mut lo, mut hi) = (cfg.s_th, top);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if delay(mid) <= deadline {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some((lo, delay(lo)))
}

/// Best objective for a fixed assignment by scanning the round deadline and
/// zooming in around the best scan point.
pub fn brute_given_assignment(p: &RoundProblem, links: &[Link], cfg: &SchedulerConfig) -> Option<f64> {
    let tops: Vec<f64> = links.iter().map(|&l| top_rate_of(p, l, cfg)).collect::<Option<_>>()?;
    let eval = |deadline: f64| -> f64 {
        let mut rates = Vec::new();
        let mut delays = Vec::new();
        for (&l, &top) in links.iter().zip(&tops) {
            match rate_under(p, l, top, deadline, cfg) {
                Some((s, d)) => {
                    rates.push(s);
                    delays.push(d);
                }
                None => return f64::INFINITY,
            }
        }
        objective(p, links, &rates, &delays, cfg)
    };
    let ends: Vec<f64> = links
        .iter()
        .zip(&tops)
        .map(|(l, &t)| link_delay(p, l.candidate, l.channel, t, cfg).unwrap_or(f64::INFINITY))
        .collect();
    let lo = links
        .iter()
        .map(|l| link_delay(p, l.candidate, l.channel, cfg.s_th, cfg).unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max);
    let hi = ends.iter().cloned().fold(lo, f64::max);
    let mut best = ends.iter().map(|&d| eval(d)).fold(eval(lo).min(eval(hi)), f64::min);
    let (mut a, mut b) = (lo, hi);
    let points = 1000;
    for level in 0..24 {
        let n = if level == 0 { points } else { 20 };
        let h = (b - a) / n as f64;
        if !(h > 0.0) {
            break;
        }
        let (mut arg, mut val) = (a, f64::INFINITY);
        for i in 0..=n {
            let d = a + h * i as f64;
            let v = eval(d);
            if v < val {
                (arg, val) = (d, v);
            }
        }
        best = best.min(val);
        a = (arg - h).max(lo);
        b = (arg + h).min(hi);
    }
    Some(best)
}

/// Best objective over every largest-cardinality assignment with exact rates.
pub fn brute_joint(p: &RoundProblem, cfg: &SchedulerConfig) -> Option<f64> {
    let k = p.candidates.len();
    let mut maps: Vec<Vec<Option<usize>>> = vec![vec![]];
    for _ in 0..k {
        maps = maps
            .into_iter()
            .flat_map(|m| {
                let mut out = vec![{
                    let mut x = m.clone();
                    x.push(None);
                    x
                }];
                for j in 0..p.channels {
                    if !m.contains(&Some(j)) {
                        let mut x = m.clone();
                        x.push(Some(j));
                        out.push(x);
                    }
                }
                out
            })
            .collect();
    }
    let mut best: Option<(usize, f64)> = None;
    for m in maps {
        let links: Vec<Link> = m
            .iter()
            .enumerate()
            .filter_map(|(candidate, j)| j.map(|channel| Link { candidate, channel }))
            .collect();
        if links.is_empty() {
            continue;
        }
        let Some(v) = brute_given_assignment(p, &links, cfg) else {
            continue;
        };
        let better = match best {
            None => true,
            Some((size, bv)) => links.len() > size || (links.len() == size && v < bv),
        };
        if better {
            best = Some((links.len(), v));
        }
    }
    best.map(|b| b.1)
}

/// Random round problem with realistic radio parameters.
pub fn random_problem<R: Rng + ?Sized>(clients: usize, channels: usize, q_de: f64, rng: &mut R) -> RoundProblem {
    let radio = RadioParams::default();
    let candidates = (0..clients)
        .map(|i| {
            let d = rng.random_range(10.0..70.0);
            let mean = channel_gain(d, 1.0);
            Candidate {
                client: i,
                weight: rng.random_range(0.05..0.5),
                q_fa: rng.random_range(0.0..2.0),
                beta: rng.random_range(0.1..0.9),
                samples: rng.random_range(50..400),
                compute: ComputeParams {
                    cycles_per_sample: 1e4,
                    cpu_freq_hz: rng.random_range(0.5..1.0) * 2e9,
                    capacitance: 1e-28,
                },
                uplink_gains: (0..channels).map(|_| mean * rng.random_range(0.2..2.0)).collect(),
                downlink_gain: mean * rng.random_range(0.2..2.0),
            }
        })
        .collect();
    RoundProblem {
        candidates,
        channels,
        q_de,
        radio,
        tau: 5,
        payload_dim: 20_000,
    }
}

/// Dense DP-SGD: full-length vectors throughout, mask applied by zeroing.
/// Consumes the streams in the same order as the sparse implementation.
pub fn reference_local_train(
    w_init: &ModelWeights,
    data: &Dataset,
    s: f64,
    cfg: &DpConfig,
    streams: &mut TrainStreams,
) -> Result<Vec<f64>> {
    let dim = w_init.dim();
    let keep: Vec<bool> = if s >= 1.0 {
        vec![true; dim]
    } else {
        (0..dim).map(|_| streams.mask.random::<f64>() < s).collect()
    };
    let threshold = match cfg.clip_mode {
        ClipMode::Adaptive => s.sqrt() * cfg.clip_c,
        ClipMode::Fixed => cfg.clip_c,
    };
    let std = cfg.sigma_hat * threshold / cfg.batch_size as f64;
    let mut w = w_init.clone();
    let mut ws = Workspace::default();
    let mut g = vec![0.0; dim];
    for _ in 0..cfg.tau {
        let mut sum = vec![0.0; dim];
        for i in index::sample(&mut streams.batch, data.len(), cfg.batch_size).iter() {
            sample_loss_grad(&w, data.row(i), data.label(i), &mut g, &mut ws);
            for (x, &k) in g.iter_mut().zip(&keep) {
                if !k {
                    *x = 0.0;
                }
            }
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > threshold {
                let scale = threshold / norm;
                g.iter_mut().for_each(|x| *x *= scale);
            }
            for (a, x) in sum.iter_mut().zip(&g) {
                *a += x;
            }
        }
        let mut step: Vec<f64> = sum.iter().map(|a| a / cfg.batch_size as f64).collect();
        if std > 0.0 {
            for (x, &k) in step.iter_mut().zip(&keep) {
                if k {
                    *x += std * streams.noise.sample::<f64, _>(StandardNormal);
                }
            }
        }
        for (p, x) in w.params_mut().iter_mut().zip(&step) {
            *p -= cfg.eta * x;
        }
    }
    Ok(w.params()
        .iter()
        .zip(w_init.params())
        .zip(&keep)
        .map(|((a, b), &k)| if k { a - b } else { 0.0 })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accountant::per_step_rdp;

    #[test]
    fn binomial_matches_full_batch_closed_form() {
        for a in [2u32, 3, 8] {
            let v = binomial_rdp(1.0, 0.8, a);
            let want = (a * (a - 1)) as f64 / (2.0 * 0.64);
            assert!((v - want).abs() < 1e-9 * want);
        }
    }

    #[test]
    fn binomial_agrees_with_quadrature() {
        for &(q, sigma) in &[(0.01, 0.6), (0.1, 1.0), (0.5, 2.0)] {
            for a in [2u32, 5, 16] {
                let b = binomial_rdp(q, sigma, a);
                let quad = per_step_rdp(q, sigma, a as f64).unwrap();
                assert!(
                    (b - quad).abs() <= 1e-6 * b.max(1e-12),
                    "q={q} s={sigma} a={a}: {b} vs {quad}"
                );
            }
        }
    }

    #[test]
    fn exhaustive_prefers_cardinality() {
        let cost = vec![vec![Some(-5.0), Some(0.0)], vec![Some(-4.0), None]];
        assert_eq!(exhaustive_matching(&cost), (2, -4.0));
        assert_eq!(matching_cost(&cost, &[Some(1), Some(0)]), Some((2, -4.0)));
        assert_eq!(matching_cost(&cost, &[Some(0), Some(0)]), None);
    }
}
