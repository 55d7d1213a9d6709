//! Round loop: scheduling, local training, aggregation, privacy bookkeeping.

use std::collections::HashMap;

use rand::Rng;

use crate::accountant::{participation_fraction, PrivacyLedger, RdpParams};
use crate::config::{DataSource, EpsilonSpec, ExperimentConfig, ModelKind};
use crate::dpsgd::{local_train, DpConfig, TrainStreams};
use crate::error::{Error, Result};
use crate::metrics::MetricsRow;
use crate::model::idx::read_idx;
use crate::model::{
    evaluate, mean_loss, partition, sample_loss_grad, synthesize_classification, Dataset, ModelShape, ModelWeights,
    PartitionSpec, Workspace,
};
use crate::rng::{Purpose, StreamRoot};
use crate::scheduler::{
    baseline_schedule, threshold_power, update_queues, Candidate, Link, Policy, RoundProblem, RoundRobinCursor,
    ScheduleDecision, SchedulerConfig, VirtualQueues,
};
use crate::wireless::{place_clients, ChannelRealization, ComputeParams};

/// Everything shared by the policy runs of one experiment.
#[derive(Debug, Clone)]
pub struct Setup {
    pub config: ExperimentConfig,
    pub root: StreamRoot,
    pub clients: Vec<Dataset>,
    pub test: Dataset,
    pub initial: ModelWeights,
    pub distances: Vec<f64>,
    /// Fresh ledgers with `beta` already set.
    pub ledgers: Vec<PrivacyLedger>,
    pub payload_dim: usize,
    /// DP parameters with the clipping threshold resolved.
    pub dp: DpConfig,
    /// Scheduler parameters with `d_avg` resolved.
    pub scheduler: SchedulerConfig,
}

fn load_data(cfg: &ExperimentConfig, root: &StreamRoot) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataSource::Synthetic => {
            let train_n = match &cfg.partition {
                crate::model::PartitionMode::PresetSizes(sizes) => {
                    sizes.iter().sum::<usize>() * (cfg.clients / sizes.len())
                }
                _ => cfg.samples_per_client * cfg.clients,
            };
            let all = synthesize_classification(
                train_n + cfg.test_samples,
                cfg.feature_dim,
                cfg.num_classes,
                cfg.separation,
                &mut root.setup_stream(Purpose::Data),
            )?;
            let train: Vec<usize> = (0..train_n).collect();
            let test: Vec<usize> = (train_n..all.len()).collect();
            Ok((all.subset(&train)?, all.subset(&test)?))
        }
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => Ok((
            read_idx(train_images, train_labels, cfg.num_classes, cfg.idx_limit)?,
            read_idx(test_images, test_labels, cfg.num_classes, cfg.idx_limit)?,
        )),
    }
}

fn epsilons(cfg: &ExperimentConfig, root: &StreamRoot) -> Vec<f64> {
    match &cfg.epsilon {
        EpsilonSpec::PerClient(list) => list.clone(),
        EpsilonSpec::Uniform { min, max } => {
            let mut rng = root.setup_stream(Purpose::Privacy);
            (0..cfg.clients)
                .map(|_| if max > min { rng.random_range(*min..*max) } else { *min })
                .collect()
        }
    }
}

fn build_ledgers(cfg: &ExperimentConfig, clients: &[Dataset], eps: &[f64]) -> Result<Vec<PrivacyLedger>> {
    // Curves depend only on the sampling ratio; equal-sized clients share one.
    let mut curves: HashMap<usize, PrivacyLedger> = HashMap::new();
    let mut ledgers = Vec::with_capacity(clients.len());
    for (data, &e) in clients.iter().zip(eps) {
        if cfg.dp.sigma_hat == 0.0 {
            ledgers.push(PrivacyLedger::unmetered(e, cfg.rounds as u64));
            continue;
        }
        let q = cfg.dp.batch_size as f64 / data.len() as f64;
        let params = RdpParams::new(q, cfg.dp.sigma_hat, cfg.dp.tau).with_delta(cfg.delta);
        let ledger = match curves.get(&data.len()) {
            Some(l) => PrivacyLedger::with_curve(l.curve().expect("metered").clone(), e)?,
            None => {
                let l = PrivacyLedger::new(&params, e)?;
                curves.insert(data.len(), l.clone());
                l
            }
        };
        ledgers.push(ledger);
    }
    let t_hats: Vec<u64> = ledgers.iter().map(PrivacyLedger::t_hat).collect();
    let betas = participation_fraction(&t_hats, cfg.channels)?;
    for (l, b) in ledgers.iter_mut().zip(betas) {
        l.set_beta(b);
    }
    Ok(ledgers)
}

impl Setup {
    /// Builds data, placement and privacy state; calibrates `d_avg` if unset.
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.dp.validate()?;
        cfg.radio.validate()?;
        let root = StreamRoot::new(cfg.seed);
        let (train, test) = load_data(cfg, &root)?;
        if test.dim() != train.dim() {
            return Err(Error::Shape(format!(
                "train features have {} columns, test {}",
                train.dim(),
                test.dim()
            )));
        }
        let spec = PartitionSpec {
            mode: cfg.partition.clone(),
            num_clients: cfg.clients,
        };
        let clients = partition(&train, &spec, &mut root.setup_stream(Purpose::Partition))?;
        if let Some(small) = clients.iter().map(Dataset::len).min() {
            if cfg.dp.batch_size > small {
                return Err(Error::Config(format!(
                    "batch_size {} exceeds the smallest client partition ({small} samples)",
                    cfg.dp.batch_size
                )));
            }
        }
        let shape = match cfg.model {
            ModelKind::Softmax => ModelShape::Softmax {
                input: train.dim(),
                classes: cfg.num_classes,
            },
            ModelKind::Mlp => ModelShape::Mlp {
                input: train.dim(),
                hidden: cfg.hidden_units,
                classes: cfg.num_classes,
            },
        };
        let initial = ModelWeights::init(shape, &mut root.setup_stream(Purpose::Init));
        let distances = place_clients(cfg.clients, cfg.area_m, &mut root.setup_stream(Purpose::Placement));
        let ledgers = build_ledgers(cfg, &clients, &epsilons(cfg, &root))?;
        let mut dp = cfg.dp.clone();
        if cfg.clip_auto {
            dp.clip_c = median_gradient_norm(&initial, &clients)?;
            log::info!("clip_c = {:.6} (median gradient norm)", dp.clip_c);
        }
        let payload_dim = if cfg.payload_dim > 0 {
            cfg.payload_dim
        } else {
            shape.dim()
        };
        let mut setup = Self {
            config: cfg.clone(),
            root,
            clients,
            test,
            initial,
            distances,
            ledgers,
            payload_dim,
            dp,
            scheduler: cfg.scheduler.clone(),
        };
        setup.scheduler.d_avg = match cfg.d_avg {
            Some(d) => d,
            None => setup.calibrate_d_avg()?,
        };
        setup.scheduler.validate()?;
        Ok(setup)
    }

    pub fn betas(&self) -> Vec<f64> {
        self.ledgers.iter().map(PrivacyLedger::beta).collect()
    }

    /// `d_avg_factor` times the mean delay of dense, delay-minimizing
    /// scheduling over the first calibration rounds.
    fn calibrate_d_avg(&self) -> Result<f64> {
        let eligible: Vec<bool> = self.ledgers.iter().map(|l| !l.exhausted()).collect();
        let queues = VirtualQueues::new(self.config.clients);
        let mut cursor = RoundRobinCursor::default();
        let mut delays = Vec::new();
        for t in 0..self.config.calibration_rounds {
            let (problem, _) = self.round_problem(t, &eligible, &queues);
            let mut rng = self.root.round_stream(t, Purpose::Baseline);
            match baseline_schedule(
                Policy::DelayMin,
                &problem,
                &self.scheduler,
                self.config.clients,
                &mut cursor,
                &mut rng,
            ) {
                Ok(d) if d.participants() > 0 => delays.push(d.round_delay),
                Ok(_) | Err(Error::EmptyRound) => {}
                Err(e) => return Err(e),
            }
        }
        if delays.is_empty() {
            return Err(Error::Config("d_avg calibration found no schedulable round".into()));
        }
        let d = self.config.d_avg_factor * delays.iter().sum::<f64>() / delays.len() as f64;
        log::info!("calibrated d_avg = {d:.6} s");
        Ok(d)
    }

    /// The round's scheduling problem over eligible clients; the second value
    /// maps candidates to client ids.
    pub fn round_problem(&self, t: usize, eligible: &[bool], queues: &VirtualQueues) -> (RoundProblem, Vec<usize>) {
        let cfg = &self.config;
        let gains = ChannelRealization::draw(
            &self.distances,
            cfg.channels,
            &mut self.root.round_stream(t, Purpose::Channel),
        );
        let mut cpu_rng = self.root.round_stream(t, Purpose::Cpu);
        let freqs: Vec<f64> = (0..cfg.clients)
            .map(|_| cpu_rng.random_range(0.5..=1.0) * cfg.cpu_max_hz)
            .collect();
        let ids: Vec<usize> = (0..cfg.clients).filter(|&i| eligible[i]).collect();
        let total: f64 = ids.iter().map(|&i| self.clients[i].len() as f64).sum();
        let candidates = ids
            .iter()
            .map(|&i| Candidate {
                client: i,
                weight: self.clients[i].len() as f64 / total,
                q_fa: queues.q_fa[i],
                beta: self.ledgers[i].beta(),
                samples: self.clients[i].len(),
                compute: ComputeParams {
                    cycles_per_sample: cfg.cycles_per_sample,
                    cpu_freq_hz: freqs[i],
                    capacitance: cfg.capacitance,
                },
                uplink_gains: gains.uplink[i].clone(),
                downlink_gain: gains.downlink[i],
            })
            .collect();
        let problem = RoundProblem {
            candidates,
            channels: cfg.channels,
            q_de: queues.q_de,
            radio: cfg.radio.clone(),
            tau: cfg.dp.tau,
            payload_dim: self.payload_dim,
        };
        (problem, ids)
    }
}

/// Median per-sample gradient norm of `w` over every client sample.
pub fn median_gradient_norm(w: &ModelWeights, clients: &[Dataset]) -> Result<f64> {
    let mut ws = Workspace::default();
    let mut grad = vec![0.0; w.dim()];
    let mut norms = Vec::new();
    for d in clients {
        for i in 0..d.len() {
            sample_loss_grad(w, d.row(i), d.label(i), &mut grad, &mut ws);
            norms.push(grad.iter().map(|g| g * g).sum::<f64>().sqrt());
        }
    }
    if norms.is_empty() {
        return Err(Error::Config("no samples to calibrate clip_c".into()));
    }
    norms.sort_by(f64::total_cmp);
    let m = norms.len() / 2;
    let median = if norms.len() % 2 == 0 {
        0.5 * (norms[m - 1] + norms[m])
    } else {
        norms[m]
    };
    if !(median > 0.0) || !median.is_finite() {
        return Err(Error::Config(format!(
            "median gradient norm {median} cannot serve as clip_c"
        )));
    }
    Ok(median)
}

/// Constants for the convergence-bound diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundEstimates {
    /// Largest pre-clip per-sample gradient norm.
    pub g: f64,
    pub l: f64,
    /// Mean squared noise norm per step.
    pub theta: f64,
    pub eps_div: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundTerms {
    pub divergence: f64,
    pub sparsification: f64,
    pub dp: f64,
}

/// Bound terms for one round; `selected` holds `(p_i, s_i)` of the assigned clients.
pub fn bound_terms(selected: &[(f64, f64)], est: &BoundEstimates, eta: f64, tau: usize) -> BoundTerms {
    let tau = tau as f64;
    BoundTerms {
        divergence: 3.0 * est.eps_div,
        sparsification: 3.0 * est.g * est.g * selected.iter().map(|(p, s)| p * (1.0 - s)).sum::<f64>(),
        dp: eta * tau * tau * est.theta * (1.0 + 3.0 * eta * est.l * tau),
    }
}

/// Bound terms for every round of a trace under fixed estimates.
pub fn bound_diagnostics(rounds: &[Vec<(f64, f64)>], est: &BoundEstimates, eta: f64, tau: usize) -> Vec<BoundTerms> {
    rounds.iter().map(|r| bound_terms(r, est, eta, tau)).collect()
}

/// State of one policy run.
#[derive(Debug, Clone)]
pub struct SimState {
    pub policy: Policy,
    pub weights: ModelWeights,
    pub eligible: Vec<bool>,
    pub ledgers: Vec<PrivacyLedger>,
    pub queues: VirtualQueues,
    pub round: usize,
    pub cum_delay: f64,
    pub rows: Vec<MetricsRow>,
    /// Rounds each client took part in.
    pub participation: Vec<usize>,
    pub cursor: RoundRobinCursor,
    max_grad_norm: f64,
    noise_sq_sum: f64,
    noise_samples: usize,
}

impl SimState {
    pub fn new(setup: &Setup, policy: Policy) -> Self {
        let u = setup.config.clients;
        Self {
            policy,
            weights: setup.initial.clone(),
            eligible: setup.ledgers.iter().map(|l| !l.exhausted()).collect(),
            ledgers: setup.ledgers.clone(),
            queues: VirtualQueues::new(u),
            round: 0,
            cum_delay: 0.0,
            rows: Vec::new(),
            participation: vec![0; u],
            cursor: RoundRobinCursor::default(),
            max_grad_norm: 0.0,
            noise_sq_sum: 0.0,
            noise_samples: 0,
        }
    }

    pub fn eligible_count(&self) -> usize {
        self.eligible.iter().filter(|&&e| e).count()
    }

    /// Running estimates from all training so far.
    pub fn estimates(&self, setup: &Setup) -> BoundEstimates {
        BoundEstimates {
            g: self.max_grad_norm,
            l: setup.config.smoothness_l,
            theta: if self.noise_samples == 0 {
                0.0
            } else {
                self.noise_sq_sum / self.noise_samples as f64
            },
            eps_div: setup.config.divergence_eps,
        }
    }
}

/// Replaces every scheduled rate by `s`, dropping links that cannot afford it.
fn force_rate(problem: &RoundProblem, d: ScheduleDecision, s: f64, cfg: &SchedulerConfig) -> Result<ScheduleDecision> {
    let bits = problem.uplink_bits(s);
    let mut links: Vec<Link> = Vec::new();
    let mut powers = Vec::new();
    for a in &d.assignments {
        let gain = problem.candidates[a.candidate].uplink_gains[a.channel];
        if let Some(p) = threshold_power(bits, gain, problem.upload_energy(a.candidate, cfg), &problem.radio) {
            links.push(a.link());
            powers.push(p);
        }
    }
    ScheduleDecision::from_parts(problem, &links, &vec![s; links.len()], &powers, cfg)
}

fn train_loss(w: &ModelWeights, clients: &[Dataset]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for d in clients {
        total += mean_loss(w, d)? * d.len() as f64;
        n += d.len();
    }
    Ok(total / n as f64)
}

/// `|D_i| / sum |D_k|` over the selected clients.
pub fn aggregation_weights(sizes: &[usize]) -> Vec<f64> {
    let total: f64 = sizes.iter().map(|&n| n as f64).sum();
    sizes.iter().map(|&n| n as f64 / total).collect()
}

/// Plays round `state.round`. The caller checks `t < T` and that clients remain.
pub fn run_round(setup: &Setup, state: &mut SimState) -> Result<()> {
    let t = state.round;
    let cfg = &setup.config;
    let sched = &setup.scheduler;
    let (problem, _) = setup.round_problem(t, &state.eligible, &state.queues);

    let mut rng = setup.root.round_stream(t, Purpose::Baseline);
    let decision = match baseline_schedule(state.policy, &problem, sched, cfg.clients, &mut state.cursor, &mut rng) {
        Ok(d) => d,
        Err(Error::EmptyRound) => ScheduleDecision::empty(&problem),
        Err(e) => return Err(e),
    };
    let decision = match cfg.fixed_rate {
        Some(s) if !decision.assignments.is_empty() => force_rate(&problem, decision, s, sched)?,
        _ => decision,
    };

    let mut chosen: Vec<(usize, f64)> = decision.assignments.iter().map(|a| (a.client, a.s)).collect();
    chosen.sort_by_key(|c| c.0);
    let sizes: Vec<usize> = chosen.iter().map(|&(i, _)| setup.clients[i].len()).collect();
    let shares = aggregation_weights(&sizes);

    let mut next = state.weights.clone();
    let mut weighted = Vec::with_capacity(chosen.len());
    for (&(i, s), &p) in chosen.iter().zip(&shares) {
        let mut streams = TrainStreams::new(&setup.root, i, t);
        let update = local_train(&state.weights, &setup.clients[i], s, &setup.dp, &mut streams, i, t)?;
        for (w, dw) in next.params_mut().iter_mut().zip(update.values()) {
            *w += p * dw;
        }
        state.max_grad_norm = state.max_grad_norm.max(update.max_grad_norm);
        state.noise_sq_sum += update.mean_noise_sq;
        state.noise_samples += 1;
        weighted.push((p, s));
    }
    if !next.is_finite() {
        return Err(Error::TrainingDivergence {
            client: chosen.first().map_or(0, |c| c.0),
            round: t,
        });
    }
    state.weights = next;

    let mut assigned = vec![false; cfg.clients];
    for &(i, _) in &chosen {
        assigned[i] = true;
        state.participation[i] += 1;
        if state.ledgers[i].record_exposure() {
            state.eligible[i] = false;
            log::debug!("client {i} retired after round {t}");
        }
    }
    let betas: Vec<f64> = state.ledgers.iter().map(PrivacyLedger::beta).collect();
    state.queues = update_queues(&state.queues, &assigned, &betas, decision.round_delay, sched.d_avg);
    state.cum_delay += decision.round_delay;

    let eval = evaluate(&state.weights, &setup.test)?;
    let terms = bound_terms(&weighted, &state.estimates(setup), setup.dp.eta, setup.dp.tau);
    state.rows.push(MetricsRow {
        round: t,
        policy: state.policy.name().to_string(),
        accuracy: eval.accuracy,
        loss: train_loss(&state.weights, &setup.clients)?,
        round_delay_s: decision.round_delay,
        cum_delay_s: state.cum_delay,
        participants: chosen.len(),
        mean_s: decision.mean_s(),
        q_de: state.queues.q_de,
        max_q_fa: state.queues.max_q_fa(),
        term_sparsification: terms.sparsification,
        term_dp: terms.dp,
        eligible: state.eligible_count(),
    });
    state.round += 1;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PolicyTrace {
    pub policy: Policy,
    pub rows: Vec<MetricsRow>,
    pub participation: Vec<usize>,
    /// Round at which every client had retired, if that happened before `T`.
    pub truncated_at: Option<usize>,
    pub final_weights: ModelWeights,
}

impl PolicyTrace {
    pub fn final_accuracy(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.accuracy)
    }

    pub fn cum_delay(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.cum_delay_s)
    }
}

#[derive(Debug, Clone)]
pub struct MetricsTrace {
    pub d_avg: f64,
    pub betas: Vec<f64>,
    pub traces: Vec<PolicyTrace>,
}

impl MetricsTrace {
    /// All rows, policy by policy.
    pub fn rows(&self) -> Vec<MetricsRow> {
        self.traces.iter().flat_map(|t| t.rows.iter().cloned()).collect()
    }

    pub fn policy(&self, p: Policy) -> Option<&PolicyTrace> {
        self.traces.iter().find(|t| t.policy == p)
    }
}

pub fn run_policy(setup: &Setup, policy: Policy) -> Result<PolicyTrace> {
    let mut state = SimState::new(setup, policy);
    let mut truncated_at = None;
    while state.round < setup.config.rounds {
        if state.eligible_count() == 0 {
            truncated_at = Some(state.round);
            log::info!("{policy}: every client retired before round {}", state.round);
            break;
        }
        run_round(setup, &mut state)?;
    }
    Ok(PolicyTrace {
        policy,
        rows: state.rows,
        participation: state.participation,
        truncated_at,
        final_weights: state.weights,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsTrace> {
    let setup = Setup::build(cfg)?;
    let traces = cfg
        .policies
        .iter()
        .map(|&p| run_policy(&setup, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsTrace {
        d_avg: setup.scheduler.d_avg,
        betas: setup.betas(),
        traces,
    })
}
