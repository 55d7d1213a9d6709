//! Oracle suites: each compares a fast routine against a slow reference.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::accountant::{per_step_rdp, RdpCurve, RdpParams};
use crate::dpsgd::generate_mask;
use crate::error::Result;
use crate::model::{sample_loss, sample_loss_grad, ModelShape, ModelWeights, Workspace};
use crate::oracle::{
    brute_joint, exhaustive_matching, grid_sparsification, matching_cost, random_problem, top_rate_of,
};
use crate::scheduler::hungarian::min_cost_matching;
use crate::scheduler::{
    optimal_assignment, optimal_power, optimal_sparsification, schedule_round, Link, ScheduleDecision, SchedulerConfig,
};

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionReport {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
    pub budget: Duration,
}

impl fmt::Display for CriterionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] criterion {:>2} {} ({:.2} s of {} s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.elapsed.as_secs_f64(),
            self.budget.as_secs(),
            self.detail
        )
    }
}

/// Times `body`, which returns `(passed, detail)`; overrunning the budget fails.
pub fn timed(
    id: u8,
    name: &'static str,
    budget_s: u64,
    body: impl FnOnce() -> Result<(bool, String)>,
) -> CriterionReport {
    let start = Instant::now();
    let (passed, detail) = body().unwrap_or_else(|e| (false, format!("error: {e}")));
    let elapsed = start.elapsed();
    let budget = Duration::from_secs(budget_s);
    CriterionReport {
        id,
        name,
        passed: passed && elapsed <= budget,
        detail,
        elapsed,
        budget,
    }
}

pub fn accountant_analytic() -> CriterionReport {
    timed(1, "accountant full-batch closed form", 5, || {
        let mut worst: f64 = 0.0;
        for &sigma in &[0.4, 0.5, 0.6, 1.0] {
            for &alpha in &[2.0, 4.0, 8.0, 16.0] {
                let want = alpha * (alpha - 1.0) / (2.0 * sigma * sigma);
                let got = per_step_rdp(1.0, sigma, alpha)?;
                worst = worst.max((got - want).abs() / want);
            }
        }
        Ok((worst <= 1e-6, format!("max relative error {worst:.3e}")))
    })
}

pub fn budget_inversion() -> CriterionReport {
    timed(2, "budget inversion brackets eps", 30, || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut bad = 0;
        for _ in 0..100 {
            let q = rng.random_range(0.01..=1.0);
            let sigma = rng.random_range(0.4..=2.0);
            let eps = rng.random_range(1.0..=20.0);
            let curve = RdpCurve::new(&RdpParams::new(q, sigma, 1))?;
            let t = curve.max_rounds(eps);
            if !(curve.accumulate(t).eps <= eps && eps < curve.accumulate(t + 1).eps) {
                bad += 1;
            }
        }
        Ok((bad == 0, format!("{bad} of 100 instances violate the bracket")))
    })
}

pub fn mask_norm_statistics() -> CriterionReport {
    timed(3, "random-mask norm statistics", 10, || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 200;
        let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let g2: f64 = g.iter().map(|x| x * x).sum();
        let trials = 10_000;
        let mut ok = true;
        let mut notes = Vec::new();
        for &s in &[0.1, 0.3, 0.5, 0.9] {
            let (mut sum_sq, mut sum) = (0.0, 0.0);
            for _ in 0..trials {
                let m = generate_mask(dim, s, &mut rng)?;
                let sq: f64 = g.iter().zip(m.bits()).filter(|(_, &k)| k).map(|(x, _)| x * x).sum();
                sum_sq += sq;
                sum += sq.sqrt();
            }
            let n = trials as f64;
            let mean_sq = sum_sq / n;
            let mean = sum / n;
            let se = ((mean_sq - mean * mean).max(0.0) / n).sqrt();
            let rel = (mean_sq - s * g2).abs() / (s * g2);
            let bound = s.sqrt() * g2.sqrt() + 3.0 * se;
            ok &= rel <= 0.02 && mean <= bound;
            notes.push(format!("s={s}: rel {rel:.4}, mean norm {mean:.4} <= {bound:.4}"));
        }
        Ok((ok, notes.join("; ")))
    })
}

/// `max over instances of |analytic - central difference| / |central difference|` in the 2-norm.
pub fn gradient_check_error(shape: ModelShape, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<f64> = (0..shape.dim())
        .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut w = ModelWeights::from_params(shape, params).expect("sized params");
    let x: Vec<f64> = (0..shape.input()).map(|_| rng.sample(StandardNormal)).collect();
    let y = rng.random_range(0..shape.classes());
    let mut ws = Workspace::default();
    let mut grad = vec![0.0; shape.dim()];
    sample_loss_grad(&w, &x, y, &mut grad, &mut ws);
    let h = 1e-5;
    let mut diff2 = 0.0;
    let mut ref2 = 0.0;
    for i in 0..shape.dim() {
        let orig = w.params()[i];
        w.params_mut()[i] = orig + h;
        let up = sample_loss(&w, &x, y, &mut ws);
        w.params_mut()[i] = orig - h;
        let down = sample_loss(&w, &x, y, &mut ws);
        w.params_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        diff2 += (grad[i] - fd).powi(2);
        ref2 += fd * fd;
    }
    diff2.sqrt() / ref2.sqrt().max(1e-12)
}

pub fn gradient_oracle() -> CriterionReport {
    timed(4, "per-sample gradients vs central differences", 10, || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut soft, mut mlp): (f64, f64) = (0.0, 0.0);
        for i in 0..20 {
            let input = rng.random_range(2..8);
            let classes = rng.random_range(2..6);
            let hidden = rng.random_range(2..8);
            soft = soft.max(gradient_check_error(ModelShape::Softmax { input, classes }, 100 + i));
            mlp = mlp.max(gradient_check_error(
                ModelShape::Mlp { input, hidden, classes },
                200 + i,
            ));
        }
        Ok((
            soft <= 1e-5 && mlp <= 1e-5,
            format!("max relative error softmax {soft:.2e}, mlp {mlp:.2e}"),
        ))
    })
}

pub fn assignment_oracle() -> CriterionReport {
    timed(5, "assignment vs exhaustive enumeration", 30, || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = SchedulerConfig::default();
        let mut bad = 0;
        let mut worst: f64 = 0.0;
        for inst in 0..1000 {
            let rows = rng.random_range(1..=6);
            let cols = rng.random_range(1..=5);
            let cost: Vec<Vec<Option<f64>>> = if inst % 2 == 0 {
                (0..rows)
                    .map(|_| {
                        (0..cols)
                            .map(|_| rng.random_bool(0.8).then(|| rng.random_range(-10.0..10.0)))
                            .collect()
                    })
                    .collect()
            } else {
                // Linear costs of a random round without delay pressure.
                let p = random_problem(rows, cols, 0.0, &mut rng);
                let got = optimal_assignment(&p, &vec![1.0; rows], &cfg)?;
                let cost: Vec<Vec<Option<f64>>> = (0..rows)
                    .map(|k| {
                        (0..cols)
                            .map(|j| {
                                let c = &p.candidates[k];
                                top_rate_of(
                                    &p,
                                    Link {
                                        candidate: k,
                                        channel: j,
                                    },
                                    &cfg,
                                )
                                .map(|s| c.q_fa - cfg.lambda * c.weight * s)
                            })
                            .collect()
                    })
                    .collect();
                let (size, best) = exhaustive_matching(&cost);
                let value: f64 = got
                    .iter()
                    .map(|a| p.candidates[a.candidate].q_fa - cfg.lambda * p.candidates[a.candidate].weight * a.s)
                    .sum();
                let gap = (value - best).abs();
                worst = worst.max(gap);
                if got.len() != size || gap > 1e-9 {
                    bad += 1;
                }
                continue;
            };
            let m = min_cost_matching(&cost);
            let (size, best) = exhaustive_matching(&cost);
            match matching_cost(&cost, &m) {
                Some((s, v)) if s == size && (v - best).abs() <= 1e-9 => worst = worst.max((v - best).abs()),
                _ => bad += 1,
            }
        }
        Ok((bad == 0, format!("{bad} of 1000 mismatches, max cost gap {worst:.2e}")))
    })
}

pub fn sparsification_oracle() -> CriterionReport {
    timed(6, "sparsification rates vs grid search", 60, || {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let links: Vec<Link> = (0..3)
            .map(|k| Link {
                candidate: k,
                channel: k,
            })
            .collect();
        let (mut bad, mut checked, mut interior, mut worst) = (0, 0, 0, f64::NEG_INFINITY);
        while checked < 50 {
            let cfg = SchedulerConfig {
                e_max: rng.random_range(0.5..10.0),
                d_avg: rng.random_range(0.5..5.0),
                ..SchedulerConfig::default()
            };
            let q_de = rng.random_range(0.5..200.0);
            let p = random_problem(3, 3, q_de, &mut rng);
            let Some(grid) = grid_sparsification(&p, &links, &cfg, 1e-3) else {
                continue;
            };
            checked += 1;
            let s = optimal_sparsification(&p, &links, &cfg)?;
            if s.iter().any(|&r| r > cfg.s_th && r < 1.0) {
                interior += 1;
            }
            let pw = optimal_power(&p, &links, &s, &cfg)?;
            let v = ScheduleDecision::from_parts(&p, &links, &s, &pw, &cfg)?.objective;
            worst = worst.max(v - grid);
            if v > grid + 1e-6 {
                bad += 1;
            }
        }
        Ok((
            bad == 0,
            format!(
                "{bad} of 50 above the grid optimum ({interior} with interior rates); max (solver - grid) {worst:.3e}"
            ),
        ))
    })
}

pub fn joint_oracle() -> CriterionReport {
    timed(7, "joint round solution vs 2x2 brute force", 60, || {
        let (mut bad, mut worst) = (0, 0.0f64);
        let mut seed = 0;
        let mut checked = 0;
        while checked < 20 {
            let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
            seed += 1;
            let cfg = SchedulerConfig {
                e_max: rng.random_range(0.5..10.0),
                d_avg: rng.random_range(0.5..5.0),
                ..SchedulerConfig::default()
            };
            let q_de = rng.random_range(0.5..200.0);
            let p = random_problem(2, 2, q_de, &mut rng);
            let Some(brute) = brute_joint(&p, &cfg) else { continue };
            checked += 1;
            let v = schedule_round(&p, &cfg)?.objective;
            let gap = (v - brute).abs();
            worst = worst.max(gap);
            if gap > 1e-6 {
                bad += 1;
            }
        }
        Ok((
            bad == 0,
            format!("{bad} of 20 differ by more than 1e-6; max gap {worst:.3e}"),
        ))
    })
}

/// Criteria 1 to 7 in order.
pub fn oracle_suite() -> Vec<CriterionReport> {
    vec![
        accountant_analytic(),
        budget_inversion(),
        mask_norm_statistics(),
        gradient_oracle(),
        assignment_oracle(),
        sparsification_oracle(),
        joint_oracle(),
    ]
}
