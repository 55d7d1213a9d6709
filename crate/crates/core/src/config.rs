//! Experiment configuration: flat `key = value` text.
//!
//! One key per line, `#` starts a comment, lists are comma separated and
//! omitted keys take their defaults. Unknown and repeated keys are rejected.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::accountant::DEFAULT_DELTA;
use crate::dpsgd::{ClipMode, DpConfig};
use crate::model::PartitionMode;
use crate::scheduler::{Policy, SchedulerConfig};
use crate::wireless::{dbm_to_watts, RadioParams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("cannot read config `{path}`: {reason}")]
    Read { path: String, reason: String },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { key: String, line: usize },
    #[error("{}: key `{key}`: {reason}", at(*.line))]
    Value {
        key: String,
        line: Option<usize>,
        reason: String,
    },
}

fn at(line: Option<usize>) -> String {
    match line {
        Some(l) => format!("line {l}"),
        None => "default".to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Softmax,
    Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic,
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum EpsilonSpec {
    Uniform { min: f64, max: f64 },
    PerClient(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: usize,
    pub clients: usize,
    pub channels: usize,
    pub policies: Vec<Policy>,
    pub output: PathBuf,

    pub data: DataSource,
    pub samples_per_client: usize,
    pub test_samples: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub separation: f64,
    pub idx_limit: Option<usize>,
    pub model: ModelKind,
    pub hidden_units: usize,
    pub partition: PartitionMode,

    /// `dp.clip_c` is replaced by the median per-sample gradient norm at the
    /// initial model when set.
    pub clip_auto: bool,
    pub dp: DpConfig,
    pub delta: f64,
    pub epsilon: EpsilonSpec,
    pub fixed_rate: Option<f64>,

    pub radio: RadioParams,
    pub power_budget_w: f64,
    pub area_m: f64,
    pub cpu_max_hz: f64,
    pub cycles_per_sample: f64,
    pub capacitance: f64,
    pub payload_dim: usize,

    /// `d_avg` is `None` until calibrated.
    pub scheduler: SchedulerConfig,
    pub d_avg: Option<f64>,
    pub calibration_rounds: usize,
    pub d_avg_factor: f64,

    pub smoothness_l: f64,
    pub divergence_eps: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            rounds: 200,
            clients: 20,
            channels: 5,
            policies: Policy::ALL.to_vec(),
            output: PathBuf::from("metrics.csv"),
            data: DataSource::Synthetic,
            samples_per_client: 1000,
            test_samples: 2000,
            feature_dim: 20,
            num_classes: 10,
            separation: 3.0,
            idx_limit: None,
            model: ModelKind::Softmax,
            hidden_units: 64,
            partition: PartitionMode::Iid,
            clip_auto: true,
            dp: DpConfig {
                clip_c: 1.0,
                sigma_hat: 0.6,
                batch_size: 32,
                tau: 60,
                eta: 0.002,
                clip_mode: ClipMode::Adaptive,
            },
            delta: DEFAULT_DELTA,
            epsilon: EpsilonSpec::Uniform { min: 2.0, max: 10.0 },
            fixed_rate: None,
            radio: RadioParams::default(),
            power_budget_w: 0.2,
            area_m: 100.0,
            cpu_max_hz: 2.4e9,
            cycles_per_sample: 1e4,
            capacitance: 1e-28,
            payload_dim: 0,
            scheduler: SchedulerConfig::default(),
            d_avg: None,
            calibration_rounds: 10,
            d_avg_factor: 1.5,
            smoothness_l: 1.0,
            divergence_eps: 0.0,
        }
    }
}

/// Every accepted key with a one-line description, in documentation order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "root random seed"),
    ("rounds", "communication rounds T"),
    ("clients", "number of clients U"),
    ("channels", "number of uplink channels N"),
    ("policies", "comma list of dp_sparfl, random, round_robin, delay_min"),
    ("output", "CSV output path"),
    ("dataset", "synthetic or idx"),
    ("samples_per_client", "training samples per client (iid, dirichlet)"),
    ("test_samples", "size of the global synthetic test set"),
    ("feature_dim", "synthetic feature dimension"),
    ("num_classes", "number of classes K"),
    ("separation", "distance between synthetic class means"),
    ("idx_train_images", "IDX training images"),
    ("idx_train_labels", "IDX training labels"),
    ("idx_test_images", "IDX test images"),
    ("idx_test_labels", "IDX test labels"),
    ("idx_limit", "keep only the first samples of each IDX file"),
    ("model", "softmax or mlp"),
    ("hidden_units", "hidden width of the mlp"),
    ("partition", "iid, dirichlet or preset"),
    ("dirichlet_concentration", "concentration of the Dirichlet label split"),
    ("preset_sizes", "comma list of client sizes or group sizes"),
    (
        "clip_c",
        "base clipping threshold C, or auto (median unclipped gradient norm)",
    ),
    ("clip_mode", "adaptive (sqrt(s) C) or fixed (C)"),
    (
        "sigma_hat",
        "noise multiplier; 0 turns off noise and privacy accounting",
    ),
    ("batch_size", "batch size |b|"),
    ("tau", "local steps per round"),
    ("eta", "learning rate"),
    ("delta", "DP failure probability"),
    ("eps_min", "lower end of the uniform epsilon range"),
    ("eps_max", "upper end of the uniform epsilon range"),
    ("eps_list", "comma list of per-client epsilons (overrides the range)"),
    ("fixed_rate", "force every scheduled client to this sparsification rate"),
    ("bandwidth_hz", "channel bandwidth B"),
    ("noise_dbm", "noise power"),
    ("downlink_dbm", "downlink transmit power"),
    ("max_power_dbm", "client transmit power cap P_max"),
    ("power_budget_mw", "client power constraint (reported only)"),
    ("interference_w", "constant interference power"),
    ("area_m", "side of the square deployment area"),
    ("cpu_max_ghz", "maximum CPU frequency"),
    ("cycles_per_sample", "CPU cycles per training sample"),
    ("capacitance", "effective switched capacitance"),
    ("payload_dim", "parameter count used for payload sizes (0 = model size)"),
    ("lambda", "drift-plus-penalty weight"),
    ("d_avg", "target average round delay in seconds, or auto"),
    ("d_avg_factor", "multiple of the calibrated delay used by auto"),
    ("calibration_rounds", "rounds used to calibrate d_avg"),
    ("e_max", "per-round energy cap per client in J"),
    ("s_th", "minimum sparsification rate"),
    ("tolerance", "coordinate-loop stopping tolerance"),
    ("max_iterations", "coordinate-loop iteration cap"),
    ("smoothness_l", "smoothness constant for the bound diagnostics"),
    ("divergence_eps", "data divergence constant for the bound diagnostics"),
];

struct Entry<'a> {
    value: &'a str,
    line: usize,
}

struct Reader<'a> {
    entries: HashMap<&'a str, Entry<'a>>,
}

impl<'a> Reader<'a> {
    fn err(&self, key: &str, reason: impl fmt::Display) -> ConfigError {
        ConfigError::Value {
            key: key.to_string(),
            line: self.entries.get(key).map(|e| e.line),
            reason: reason.to_string(),
        }
    }

    fn raw(&self, key: &str) -> Option<&'a str> {
        self.entries.get(key).map(|e| e.value)
    }

    fn parse<T: FromStr>(&self, key: &str, what: &str) -> Result<Option<T>, ConfigError> {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| self.err(key, format!("`{v}` is not {what}")))
            })
            .transpose()
    }

    fn count(&self, key: &str, default: usize, min: usize) -> Result<usize, ConfigError> {
        let v = self.parse::<usize>(key, "a non-negative integer")?.unwrap_or(default);
        if v < min {
            return Err(self.err(key, format!("{v} must be >= {min}")));
        }
        Ok(v)
    }

    fn real(&self, key: &str, default: f64, ok: impl Fn(f64) -> bool, rule: &str) -> Result<f64, ConfigError> {
        let v = self.parse::<f64>(key, "a number")?.unwrap_or(default);
        if !v.is_finite() || !ok(v) {
            return Err(self.err(key, format!("{v} must be {rule}")));
        }
        Ok(v)
    }

    fn positive(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        self.real(key, default, |v| v > 0.0, "> 0")
    }

    fn list<T: FromStr>(&self, key: &str, what: &str) -> Result<Option<Vec<T>>, ConfigError> {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(|item| {
                        item.trim()
                            .parse::<T>()
                            .map_err(|_| self.err(key, format!("`{}` is not {what}", item.trim())))
                    })
                    .collect()
            })
            .transpose()
    }

    fn path(&self, key: &str) -> Result<PathBuf, ConfigError> {
        self.raw(key)
            .map(PathBuf::from)
            .ok_or_else(|| self.err(key, "required when dataset = idx"))
    }
}

fn split_entries(text: &str) -> Result<HashMap<&str, Entry<'_>>, ConfigError> {
    let known: Vec<&str> = KEYS.iter().map(|(k, _)| *k).collect();
    let mut entries = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(ConfigError::Syntax { line });
        }
        if !known.contains(&key) {
            return Err(ConfigError::UnknownKey {
                key: key.to_string(),
                line,
            });
        }
        if entries.insert(key, Entry { value, line }).is_some() {
            return Err(ConfigError::Duplicate {
                key: key.to_string(),
                line,
            });
        }
    }
    Ok(entries)
}

/// Parses configuration text; omitted keys take their defaults.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let r = Reader {
        entries: split_entries(text)?,
    };
    let d = ExperimentConfig::default();

    let policies = match r.list::<String>("policies", "a policy")? {
        None => d.policies.clone(),
        Some(names) => names
            .iter()
            .map(|n| {
                n.parse::<Policy>()
                    .map_err(|_| r.err("policies", format!("unknown policy `{n}`")))
            })
            .collect::<Result<Vec<_>, _>>()?,
    };
    if policies.is_empty() {
        return Err(r.err("policies", "at least one policy is required"));
    }

    let data = match r.raw("dataset").unwrap_or("synthetic") {
        "synthetic" => DataSource::Synthetic,
        "idx" => DataSource::Idx {
            train_images: r.path("idx_train_images")?,
            train_labels: r.path("idx_train_labels")?,
            test_images: r.path("idx_test_images")?,
            test_labels: r.path("idx_test_labels")?,
        },
        other => return Err(r.err("dataset", format!("`{other}` is not synthetic or idx"))),
    };
    let model = match r.raw("model").unwrap_or("softmax") {
        "softmax" => ModelKind::Softmax,
        "mlp" => ModelKind::Mlp,
        other => return Err(r.err("model", format!("`{other}` is not softmax or mlp"))),
    };
    let partition = match r.raw("partition").unwrap_or("iid") {
        "iid" => PartitionMode::Iid,
        "dirichlet" => PartitionMode::Dirichlet(r.positive("dirichlet_concentration", 0.2)?),
        "preset" => {
            let sizes = r
                .list::<usize>("preset_sizes", "a sample count")?
                .unwrap_or_else(|| vec![300, 600, 1800, 2100]);
            if sizes.contains(&0) {
                return Err(r.err("preset_sizes", "sizes must be >= 1"));
            }
            PartitionMode::PresetSizes(sizes)
        }
        other => return Err(r.err("partition", format!("`{other}` is not iid, dirichlet or preset"))),
    };
    let clip_mode = match r.raw("clip_mode").unwrap_or("adaptive") {
        "adaptive" => ClipMode::Adaptive,
        "fixed" => ClipMode::Fixed,
        other => return Err(r.err("clip_mode", format!("`{other}` is not adaptive or fixed"))),
    };

    let epsilon = match r.list::<f64>("eps_list", "a number")? {
        Some(list) => {
            if list.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
                return Err(r.err("eps_list", "every epsilon must be > 0"));
            }
            EpsilonSpec::PerClient(list)
        }
        None => {
            let min = r.positive("eps_min", 2.0)?;
            let max = r.real("eps_max", 10.0, |v| v >= min, "at least eps_min")?;
            EpsilonSpec::Uniform { min, max }
        }
    };

    let clients = r.count("clients", d.clients, 1)?;
    if let EpsilonSpec::PerClient(list) = &epsilon {
        if list.len() != clients {
            return Err(r.err("eps_list", format!("{} values for {clients} clients", list.len())));
        }
    }
    if let PartitionMode::PresetSizes(sizes) = &partition {
        if clients % sizes.len() != 0 {
            return Err(r.err(
                "preset_sizes",
                format!("{} sizes do not divide {clients} clients", sizes.len()),
            ));
        }
    }

    let fixed_rate = r
        .parse::<f64>("fixed_rate", "a number")?
        .map(|s| {
            if s > 0.0 && s <= 1.0 {
                Ok(s)
            } else {
                Err(r.err("fixed_rate", format!("{s} not in (0, 1]")))
            }
        })
        .transpose()?;

    let d_avg = match r.raw("d_avg") {
        None | Some("auto") => None,
        Some(_) => Some(r.positive("d_avg", 1.0)?),
    };

    let clip_auto = matches!(r.raw("clip_c"), None | Some("auto"));
    let dp = DpConfig {
        clip_c: if clip_auto {
            d.dp.clip_c
        } else {
            r.positive("clip_c", d.dp.clip_c)?
        },
        sigma_hat: r.real("sigma_hat", d.dp.sigma_hat, |v| v >= 0.0, ">= 0")?,
        batch_size: r.count("batch_size", d.dp.batch_size, 1)?,
        tau: r.count("tau", d.dp.tau, 1)?,
        eta: r.positive("eta", d.dp.eta)?,
        clip_mode,
    };
    let radio = RadioParams {
        bandwidth_hz: r.positive("bandwidth_hz", d.radio.bandwidth_hz)?,
        noise_w: dbm_to_watts(r.real("noise_dbm", -107.0, |_| true, "finite")?),
        downlink_power_w: dbm_to_watts(r.real("downlink_dbm", 23.0, |_| true, "finite")?),
        max_power_w: dbm_to_watts(r.real("max_power_dbm", 30.0, |_| true, "finite")?),
        interference_w: r.real("interference_w", 0.0, |v| v >= 0.0, ">= 0")?,
    };
    let scheduler = SchedulerConfig {
        lambda: r.positive("lambda", d.scheduler.lambda)?,
        d_avg: d_avg.unwrap_or(d.scheduler.d_avg),
        e_max: r.positive("e_max", d.scheduler.e_max)?,
        s_th: r.real("s_th", d.scheduler.s_th, |v| v > 0.0 && v <= 1.0, "in (0, 1]")?,
        tolerance: r.real("tolerance", d.scheduler.tolerance, |v| v >= 0.0, ">= 0")?,
        max_iterations: r.count("max_iterations", d.scheduler.max_iterations, 1)?,
    };
    if let Some(s) = fixed_rate {
        if s < scheduler.s_th {
            return Err(r.err("fixed_rate", format!("{s} is below s_th = {}", scheduler.s_th)));
        }
    }

    Ok(ExperimentConfig {
        seed: r.parse::<u64>("seed", "a non-negative integer")?.unwrap_or(d.seed),
        rounds: r.count("rounds", d.rounds, 1)?,
        clients,
        channels: r.count("channels", d.channels, 1)?,
        policies,
        output: r.raw("output").map(PathBuf::from).unwrap_or(d.output),
        data,
        samples_per_client: r.count("samples_per_client", d.samples_per_client, 1)?,
        test_samples: r.count("test_samples", d.test_samples, 1)?,
        feature_dim: r.count("feature_dim", d.feature_dim, 1)?,
        num_classes: r.count("num_classes", d.num_classes, 2)?,
        separation: r.real("separation", d.separation, |v| v >= 0.0, ">= 0")?,
        idx_limit: r.parse::<usize>("idx_limit", "a non-negative integer")?,
        model,
        hidden_units: r.count("hidden_units", d.hidden_units, 1)?,
        partition,
        clip_auto,
        dp,
        delta: r.real("delta", d.delta, |v| v > 0.0 && v < 1.0, "in (0, 1)")?,
        epsilon,
        fixed_rate,
        radio,
        power_budget_w: r.positive("power_budget_mw", 200.0)? / 1000.0,
        area_m: r.positive("area_m", d.area_m)?,
        cpu_max_hz: r.positive("cpu_max_ghz", 2.4)? * 1e9,
        cycles_per_sample: r.positive("cycles_per_sample", d.cycles_per_sample)?,
        capacitance: r.positive("capacitance", d.capacitance)?,
        payload_dim: r.count("payload_dim", 0, 0)?,
        scheduler,
        d_avg,
        calibration_rounds: r.count("calibration_rounds", d.calibration_rounds, 1)?,
        d_avg_factor: r.positive("d_avg_factor", d.d_avg_factor)?,
        smoothness_l: r.real("smoothness_l", d.smoothness_l, |v| v >= 0.0, ">= 0")?,
        divergence_eps: r.real("divergence_eps", d.divergence_eps, |v| v >= 0.0, ">= 0")?,
    })
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_config_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse_config_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!((c.clients, c.channels), (20, 5));
        assert_eq!(c.radio.bandwidth_hz, 15_000.0);
        assert_eq!(c.scheduler.lambda, 50.0);
        assert_eq!(c.dp.eta, 0.002);
        assert_eq!(c.dp.tau, 60);
        assert_eq!(c.delta, 1e-3);
        assert_eq!(c.epsilon, EpsilonSpec::Uniform { min: 2.0, max: 10.0 });
        assert!((c.radio.max_power_w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn values_comments_and_lists() {
        let c = parse_config_str(
            "# experiment\nclients = 4  # four\npolicies = random, delay_min\n\
             partition = preset\npreset_sizes = 300,600,1800,2100\nd_avg = 2.5\nnoise_dbm = -100\n",
        )
        .unwrap();
        assert_eq!(c.clients, 4);
        assert_eq!(c.policies, vec![Policy::Random, Policy::DelayMin]);
        assert_eq!(c.partition, PartitionMode::PresetSizes(vec![300, 600, 1800, 2100]));
        assert_eq!(c.d_avg, Some(2.5));
        assert!((c.radio.noise_w - 1e-13).abs() < 1e-25);
    }

    #[test]
    fn negative_count_names_the_key() {
        let e = parse_config_str("seed = 3\nclients = -3\n").unwrap_err();
        assert_eq!(
            e,
            ConfigError::Value {
                key: "clients".into(),
                line: Some(2),
                reason: "`-3` is not a non-negative integer".into()
            }
        );
        assert!(e.to_string().contains("clients"));
        assert!(matches!(
            parse_config_str("clients = 0"),
            Err(ConfigError::Value { .. })
        ));
    }

    #[test]
    fn unknown_duplicate_and_malformed() {
        assert_eq!(
            parse_config_str("foo = 1").unwrap_err(),
            ConfigError::UnknownKey {
                key: "foo".into(),
                line: 1
            }
        );
        assert!(matches!(
            parse_config_str("seed = 1\nseed = 2"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
        assert_eq!(
            parse_config_str("\nseed 1").unwrap_err(),
            ConfigError::Syntax { line: 2 }
        );
        assert!(parse_config_str("eps_min = 5\neps_max = 1").is_err());
        assert!(parse_config_str("fixed_rate = 1.5").is_err());
        assert!(parse_config_str("dataset = idx").is_err());
        assert!(parse_config_str("clients = 3\neps_list = 1,2").is_err());
    }

    #[test]
    fn every_key_is_documented_once() {
        let mut names: Vec<&str> = KEYS.iter().map(|(k, _)| *k).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn missing_file_is_a_read_error() {
        assert!(matches!(
            parse_config(Path::new("/nonexistent/sparfl.cfg")),
            Err(ConfigError::Read { .. })
        ));
    }
}
