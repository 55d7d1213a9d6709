use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sparfl::config::{parse_config, ConfigError, KEYS};
use sparfl::metrics::emit_metrics_csv;
use sparfl::scheduler::Policy;
use sparfl::simulator::run_experiment;
use sparfl::verify::oracle_suite;
use sparfl::Error;

/// Simulates sparsified, differentially private federated learning over a
/// shared wireless uplink.
#[derive(Debug, Parser)]
#[command(name = "sparfl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment and write per-round metrics as CSV.
    Run {
        /// Configuration file (`key = value` lines).
        #[arg(long)]
        config: PathBuf,
        /// Override the root seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the policy list (comma separated).
        #[arg(long, value_delimiter = ',')]
        policy: Option<Vec<String>>,
        /// Override the CSV output path.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the brute-force oracle suites.
    Verify,
    /// List the configuration keys.
    Keys,
}

const EXIT_CONFIG: u8 = 3;
const EXIT_RUN: u8 = 4;
const EXIT_IO: u8 = 5;
const EXIT_VERIFY: u8 = 6;

fn config_failure(e: ConfigError) -> ExitCode {
    eprintln!("config error: {e}");
    ExitCode::from(EXIT_CONFIG)
}

fn run_failure(e: Error) -> ExitCode {
    let code = match e {
        Error::Config(_)
        | Error::InvalidParameter { .. }
        | Error::Partition(_)
        | Error::DegenerateBudget
        | Error::Shape(_) => EXIT_CONFIG,
        Error::Io(_) | Error::Idx(_) => EXIT_IO,
        _ => EXIT_RUN,
    };
    let kind = match code {
        EXIT_CONFIG => "config error",
        EXIT_IO => "i/o error",
        _ => "simulation error",
    };
    eprintln!("{kind}: {e}");
    ExitCode::from(code)
}

fn run(config: PathBuf, seed: Option<u64>, policy: Option<Vec<String>>, output: Option<PathBuf>) -> ExitCode {
    let mut cfg = match parse_config(&config) {
        Ok(c) => c,
        Err(e) => return config_failure(e),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(names) = policy {
        match names.iter().map(|n| n.parse::<Policy>()).collect::<Result<Vec<_>, _>>() {
            Ok(p) if !p.is_empty() => cfg.policies = p,
            Ok(_) => return run_failure(Error::Config("empty policy list".into())),
            Err(e) => return run_failure(e),
        }
    }
    if let Some(o) = output {
        cfg.output = o;
    }
    let trace = match run_experiment(&cfg) {
        Ok(t) => t,
        Err(e) => return run_failure(e),
    };
    if let Err(e) = emit_metrics_csv(&trace.rows(), &cfg.output) {
        return run_failure(e);
    }
    log::info!("d_avg = {} s", trace.d_avg);
    for t in &trace.traces {
        println!(
            "{:<12} rounds {:>4}  accuracy {:.4}  cumulative delay {:.3} s{}",
            t.policy.name(),
            t.rows.len(),
            t.final_accuracy(),
            t.cum_delay(),
            t.truncated_at
                .map_or(String::new(), |r| format!("  (all clients retired at round {r})"))
        );
    }
    println!("wrote {}", cfg.output.display());
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            seed,
            policy,
            output,
        } => run(config, seed, policy, output),
        Command::Verify => {
            let reports = oracle_suite();
            for r in &reports {
                println!("{r}");
            }
            let failed = reports.iter().filter(|r| !r.passed).count();
            println!("{} passed, {failed} failed", reports.len() - failed);
            if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_VERIFY)
            }
        }
        Command::Keys => {
            for (k, doc) in KEYS {
                println!("{k:<26} {doc}");
            }
            ExitCode::SUCCESS
        }
    }
}
