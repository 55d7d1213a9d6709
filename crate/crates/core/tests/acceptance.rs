//! Acceptance suite: one line per criterion, nonzero exit if any fails.

use std::process::ExitCode;

use sparfl::config::{parse_config_str, ExperimentConfig};
use sparfl::metrics::emit_metrics_csv;
use sparfl::scheduler::Policy;
use sparfl::simulator::{run_experiment, PolicyTrace};
use sparfl::verify::{oracle_suite, timed, CriterionReport};
use sparfl::Result;

fn config(text: &str, seed: u64) -> Result<ExperimentConfig> {
    let mut cfg = parse_config_str(text).map_err(|e| sparfl::Error::Config(e.to_string()))?;
    cfg.seed = seed;
    Ok(cfg)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean with the n - 1 variance.
fn std_err(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let n = xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
}

fn trace(traces: &sparfl::simulator::MetricsTrace, p: Policy) -> &PolicyTrace {
    traces.policy(p).expect("policy was configured")
}

const QUEUES: &str = "
rounds = 500
clients = 10
channels = 3
policies = dp_sparfl
samples_per_client = 500
batch_size = 10
tau = 5
eta = 0.05
sigma_hat = 1.5
eps_min = 5
eps_max = 10
payload_dim = 20000
d_avg_factor = 1.0
";

fn queue_feasibility() -> CriterionReport {
    timed(8, "virtual queues stay bounded", 120, || {
        let cfg = config(QUEUES, 1)?;
        let run = run_experiment(&cfg)?;
        let t = trace(&run, Policy::DpSparFl);
        let rounds = t.rows.len() as f64;
        let q = t.rows.iter().map(|r| r.q_de.max(r.max_q_fa)).fold(0.0, f64::max);
        let worst_gap = t
            .participation
            .iter()
            .zip(&run.betas)
            .map(|(&c, &b)| b - c as f64 / rounds)
            .fold(f64::NEG_INFINITY, f64::max);
        let mean_delay = t.cum_delay() / rounds;
        let ok = t.rows.len() == cfg.rounds && q / rounds < 0.05 && worst_gap <= 0.05 && mean_delay <= 1.05 * run.d_avg;
        Ok((
            ok,
            format!(
                "{} rounds, max Q/T {:.4}, max (beta - participation) {worst_gap:.4}, mean delay {mean_delay:.3} s vs d_avg {:.3} s",
                t.rows.len(),
                q / rounds,
                run.d_avg
            ),
        ))
    })
}

const CLIPPING: &str = "
rounds = 200
clients = 10
channels = 5
policies = round_robin
samples_per_client = 500
separation = 5
batch_size = 4
tau = 5
eta = 0.1
sigma_hat = 0.6
fixed_rate = 0.25
d_avg = 100
";

fn adaptive_clipping() -> CriterionReport {
    timed(9, "sqrt(s) C clipping beats fixed C at s = 0.25", 300, || {
        let (mut adaptive, mut fixed) = (Vec::new(), Vec::new());
        for seed in 1..=5 {
            for (mode, out) in [("adaptive", &mut adaptive), ("fixed", &mut fixed)] {
                let cfg = config(&format!("{CLIPPING}clip_mode = {mode}\n"), seed)?;
                out.push(trace(&run_experiment(&cfg)?, Policy::RoundRobin).final_accuracy());
            }
        }
        let diffs: Vec<f64> = adaptive.iter().zip(&fixed).map(|(a, f)| a - f).collect();
        let margin = mean(&diffs);
        let se = std_err(&diffs);
        Ok((
            margin >= 2.0 * se,
            format!(
                "mean accuracy adaptive {:.4}, fixed {:.4}; margin {margin:.4} vs 2 SE {:.4}",
                mean(&adaptive),
                mean(&fixed),
                2.0 * se
            ),
        ))
    })
}

const DELAY_REGIME: &str = "
rounds = 200
partition = dirichlet
samples_per_client = 1000
separation = 5
batch_size = 8
tau = 10
eta = 0.1
payload_dim = 100000
d_avg_factor = 1.0
";

fn lambda_monotone() -> CriterionReport {
    timed(10, "cumulative delay nondecreasing in lambda", 300, || {
        let mut bad = 0;
        let mut notes = Vec::new();
        for seed in 1..=5 {
            let mut delays = Vec::new();
            for lambda in [5, 50, 500] {
                let cfg = config(
                    &format!("{DELAY_REGIME}policies = dp_sparfl\nlambda = {lambda}\n"),
                    seed,
                )?;
                delays.push(trace(&run_experiment(&cfg)?, Policy::DpSparFl).cum_delay());
            }
            if delays.windows(2).any(|w| w[1] < w[0]) {
                bad += 1;
            }
            notes.push(format!("{:.0}/{:.0}/{:.0}", delays[0], delays[1], delays[2]));
        }
        Ok((
            bad == 0,
            format!("{bad} of 5 seeds violate; delays {}", notes.join(", ")),
        ))
    })
}

fn versus_baselines() -> CriterionReport {
    timed(11, "accuracy and delay against baselines", 600, || {
        let mut acc: Vec<Vec<f64>> = vec![Vec::new(); Policy::ALL.len()];
        let mut slower = 0;
        for seed in 1..=5 {
            let cfg = config(DELAY_REGIME, seed)?;
            let run = run_experiment(&cfg)?;
            for (k, p) in Policy::ALL.into_iter().enumerate() {
                acc[k].push(trace(&run, p).final_accuracy());
            }
            let ours = trace(&run, Policy::DpSparFl);
            for p in [Policy::Random, Policy::RoundRobin] {
                let other = trace(&run, p);
                let m = ours.rows.len().min(other.rows.len());
                if m == 0 || ours.rows[m - 1].cum_delay_s >= other.rows[m - 1].cum_delay_s {
                    slower += 1;
                }
            }
        }
        let ours = mean(&acc[0]);
        let mut ok = slower == 0;
        let mut notes = vec![format!("dp_sparfl {ours:.4}")];
        for (k, p) in Policy::ALL.into_iter().enumerate().skip(1) {
            let (m, se) = (mean(&acc[k]), std_err(&acc[k]));
            ok &= ours >= m - se;
            notes.push(format!("{p} {m:.4} (SE {se:.4})"));
        }
        Ok((
            ok,
            format!(
                "mean accuracy {}; {slower} of 10 delay comparisons not strictly lower",
                notes.join(", ")
            ),
        ))
    })
}

const SMALL: &str = "
rounds = 30
clients = 6
channels = 2
samples_per_client = 200
batch_size = 8
tau = 3
eta = 0.1
";

fn determinism() -> CriterionReport {
    timed(12, "same seed gives byte-identical CSV", 300, || {
        let dir = tempfile::tempdir()?;
        let mut outputs = Vec::new();
        for (k, seed) in [9, 9, 10].into_iter().enumerate() {
            let cfg = config(SMALL, seed)?;
            let path = dir.path().join(format!("run{k}.csv"));
            emit_metrics_csv(&run_experiment(&cfg)?.rows(), &path)?;
            outputs.push(std::fs::read(&path)?);
        }
        let same = outputs[0] == outputs[1];
        let differs = outputs[0] != outputs[2];
        Ok((
            same && differs,
            format!(
                "{} bytes; repeat identical: {same}; other seed differs: {differs}",
                outputs[0].len()
            ),
        ))
    })
}

fn main() -> ExitCode {
    let mut reports = oracle_suite();
    for r in &reports {
        println!("{r}");
    }
    let experiments: [fn() -> CriterionReport; 5] = [
        queue_feasibility,
        adaptive_clipping,
        lambda_monotone,
        versus_baselines,
        determinism,
    ];
    for f in experiments {
        let r = f();
        println!("{r}");
        reports.push(r);
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("acceptance: {} passed, {failed} failed", reports.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
