//! Round orchestration.
//!
//! Each round the server broadcasts the current model and the subset ratios
//! `mu`, every active client trains locally from it, and the server averages
//! the returned parameters. When the number of clients changes, the monitor
//! compares this round's per-class output-row movement with the previous
//! round's. Classes judged vanished get their output row carried forward
//! from the broadcast model, and the new `mu` replaces the old one for the
//! clients' self-training.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::dataset::{ClientDataset, LabeledSet, ScenarioSchedule};
use crate::error::{contract, Result};
use crate::exec::Execution;
use crate::metrics::{compute_metrics, confusion, MetricsRecord};
use crate::monitor::{self, ChangeRatioReport, ClassDelta, MonitorThresholds};
use crate::nn::{ModelParams, TrainConfig};
use crate::seed::{self, Stream};
use crate::selftrain::{self_train, MuSchedule, SelfTrainConfig, SelfTrainDiagnostics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationWeights {
    /// `1 / K` for every client.
    #[default]
    Uniform,
    ProportionalToLabeledSize,
}

impl AggregationWeights {
    pub fn weights(self, labeled_sizes: &[usize]) -> Vec<f64> {
        let k = labeled_sizes.len();
        let total: usize = labeled_sizes.iter().sum();
        match self {
            AggregationWeights::ProportionalToLabeledSize if total > 0 => {
                labeled_sizes.iter().map(|&n| n as f64 / total as f64).collect()
            }
            _ => vec![1.0 / k as f64; k],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Monitor, carry-forward and `mu`-proportional self-training.
    Fcvi,
    /// Plain FedAvg on labeled data only.
    FedavgSupervised,
    /// FedAvg with classical self-training (`mu` = 1) every round.
    FedavgSelftrainUniform,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Fcvi, Mode::FedavgSupervised, Mode::FedavgSelftrainUniform];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Fcvi => "fcvi",
            Mode::FedavgSupervised => "fedavg_supervised",
            Mode::FedavgSelftrainUniform => "fedavg_selftrain_uniform",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected fcvi, fedavg_supervised or fedavg_selftrain_uniform)"))
    }
}

/// Weighted average of client parameters, accumulated in slice order as
/// `p_0 + sum_i w_i (p_i - p_0)`. Identical inputs therefore average to
/// themselves exactly.
pub fn aggregate(params: &[&ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let first = *params.first().ok_or_else(|| contract("cannot aggregate an empty client list"))?;
    if weights.len() != params.len() {
        return Err(contract("one weight per client required"));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(contract("weights must be nonnegative"));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(contract(format!("weights must sum to 1, got {sum}")));
    }
    if params.iter().any(|p| !p.same_shape(first)) {
        return Err(contract("client parameter shapes differ"));
    }
    let mut out = first.clone();
    for (p, &w) in params.iter().zip(weights).skip(1) {
        for ((o, &v), &base) in out.values_mut().zip(p.values()).zip(first.values()) {
            *o += w * (v - base);
        }
    }
    Ok(out)
}

/// A client's contribution to a round.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ModelParams,
    pub weight: f64,
}

/// Aggregates in ascending client-id order regardless of input order.
pub fn aggregate_updates(updates: &[ClientUpdate]) -> Result<ModelParams> {
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let params: Vec<&ModelParams> = sorted.iter().map(|u| &u.params).collect();
    let weights: Vec<f64> = sorted.iter().map(|u| u.weight).collect();
    aggregate(&params, &weights)
}

/// Restores the output rows of `vanished` classes from `theta_old`.
pub fn carry_forward(theta_new: &ModelParams, theta_old: &ModelParams, vanished: &[usize]) -> Result<ModelParams> {
    if !theta_new.same_shape(theta_old) {
        return Err(contract("parameter shapes differ"));
    }
    let mut out = theta_new.clone();
    for &l in vanished {
        out.set_output_row(l, theta_old.output_row(l)?.view())?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    /// Model broadcast at the start of the next round.
    pub theta: ModelParams,
    pub theta_prev_broadcast: Option<ModelParams>,
    pub last_deltas: Option<Vec<ClassDelta>>,
    pub k_prev: Option<usize>,
    /// Subset ratios from the latest monitored round still in force.
    pub mu: Option<Vec<f64>>,
    /// Last completed round.
    pub round: usize,
}

impl ServerState {
    pub fn new(theta: ModelParams) -> Self {
        Self {
            theta,
            theta_prev_broadcast: None,
            last_deltas: None,
            k_prev: None,
            mu: None,
            round: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RoundConfig<'a> {
    pub mode: Mode,
    /// `rng_seed` is the run's base training seed.
    pub train: TrainConfig,
    pub self_train: SelfTrainConfig,
    pub monitor: MonitorThresholds,
    pub aggregation: AggregationWeights,
    pub execution: Execution,
    pub test_set: &'a LabeledSet,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientSelfTrain {
    pub client: usize,
    #[serde(flatten)]
    pub diagnostics: SelfTrainDiagnostics,
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundReport {
    pub round: usize,
    pub k: usize,
    pub active_clients: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub monitor: Option<ChangeRatioReport>,
    pub carry_forward: Vec<usize>,
    pub metrics: MetricsRecord,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub self_train: Vec<ClientSelfTrain>,
    #[serde(skip)]
    pub aggregated: ModelParams,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl PartialEq for RoundReport {
    /// Wall time is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.round == other.round
            && self.k == other.k
            && self.active_clients == other.active_clients
            && self.monitor == other.monitor
            && self.carry_forward == other.carry_forward
            && self.metrics == other.metrics
            && self.self_train == other.self_train
            && self.aggregated == other.aggregated
    }
}

pub fn evaluate(params: &ModelParams, test_set: &LabeledSet) -> Result<MetricsRecord> {
    let predictions = params.predict(test_set.features())?;
    compute_metrics(&confusion(&predictions, test_set.labels(), test_set.classes())?)
}

/// One federated round over the active `clients` (any order; they are
/// processed by ascending id).
pub fn run_round(
    state: &ServerState,
    clients: &[(usize, &ClientDataset)],
    cfg: &RoundConfig<'_>,
) -> Result<(ServerState, RoundReport)> {
    let started = Instant::now();
    if clients.is_empty() {
        return Err(contract("a round needs at least one active client"));
    }
    let mut clients = clients.to_vec();
    clients.sort_by_key(|(id, _)| *id);
    let round = state.round + 1;
    let k = clients.len();
    let theta = &state.theta;
    let classes = theta.classes();
    let uniform_mu = vec![1.0; classes];
    let broadcast_mu = match cfg.mode {
        Mode::Fcvi => match cfg.self_train.mu_schedule {
            MuSchedule::Persistent => Some(state.mu.as_deref().unwrap_or(&uniform_mu)),
            MuSchedule::AfterChangeOnly => state.mu.as_deref(),
        },
        Mode::FedavgSelftrainUniform => Some(uniform_mu.as_slice()),
        Mode::FedavgSupervised => None,
    };

    let results = cfg.execution.map(&clients, |&(id, data)| {
        let tc = cfg
            .train
            .with_seed(seed::derive(cfg.train.rng_seed, Stream::LocalTraining, &[round as u64, id as u64]));
        match broadcast_mu {
            Some(mu) => self_train(theta, data, mu, &cfg.self_train, &tc).map(|(p, d)| (p, Some(d))),
            None => theta.train_local(&data.labeled, &tc).map(|p| (p, None)),
        }
    });
    let mut locals = Vec::with_capacity(k);
    let mut diagnostics = Vec::new();
    for ((id, _), result) in clients.iter().zip(results) {
        let (params, diag) = result?;
        locals.push(params);
        if let Some(diagnostics_for_client) = diag {
            diagnostics.push(ClientSelfTrain {
                client: *id,
                diagnostics: diagnostics_for_client,
            });
        }
    }
    let sizes: Vec<usize> = clients.iter().map(|(_, d)| d.labeled.len()).collect();
    let weights = cfg.aggregation.weights(&sizes);
    let refs: Vec<&ModelParams> = locals.iter().collect();
    let mut aggregated = aggregate(&refs, &weights)?;
    let deltas = monitor::per_class_deltas(theta, &aggregated)?;

    let mut report = None;
    let mut carried = Vec::new();
    let mut next_mu = match cfg.self_train.mu_schedule {
        MuSchedule::Persistent => state.mu.clone(),
        MuSchedule::AfterChangeOnly => None,
    };
    if cfg.mode == Mode::Fcvi {
        let changed = state.k_prev.is_some_and(|kp| kp != k);
        if changed || (cfg.monitor.every_round && round >= 2) {
            match (&state.last_deltas, state.k_prev) {
                (Some(prev), Some(k_prev)) => {
                    let floor = cfg.monitor.denominator_floor(theta);
                    let estimates = monitor::estimate_all(prev, &deltas, k_prev, k, cfg.monitor.signal, floor)?;
                    let r = ChangeRatioReport::assemble(&estimates, k_prev, k, &cfg.monitor);
                    if r.r_min.is_none() {
                        log::warn!("round {round}: monitor inconclusive, falling back to mu = 1");
                    }
                    carried = r.vanished();
                    if !carried.is_empty() {
                        aggregated = carry_forward(&aggregated, theta, &carried)?;
                    }
                    next_mu = Some(r.mu.clone());
                    report = Some(r);
                }
                _ => log::info!("round {round}: client count changed before any deltas were recorded; monitor skipped"),
            }
        }
    }

    let metrics = evaluate(&aggregated, cfg.test_set)?;
    let next = ServerState {
        theta: aggregated.clone(),
        theta_prev_broadcast: Some(theta.clone()),
        last_deltas: Some(deltas),
        k_prev: Some(k),
        mu: next_mu,
        round,
    };
    let report = RoundReport {
        round,
        k,
        active_clients: clients.iter().map(|(id, _)| *id).collect(),
        monitor: report,
        carry_forward: carried,
        metrics,
        self_train: diagnostics,
        aggregated,
        wall_time: started.elapsed(),
    };
    Ok((next, report))
}

/// A scenario with its generated data, ready to run under any mode.
#[derive(Debug, Clone)]
pub struct Simulation {
    schedule: ScenarioSchedule,
    seed: u64,
    clients: BTreeMap<usize, ClientDataset>,
    test_set: LabeledSet,
    initial: ModelParams,
}

impl Simulation {
    pub fn new(schedule: ScenarioSchedule, seed: u64) -> Result<Self> {
        schedule.validate()?;
        let clients = schedule.build_clients(seed)?;
        let test_set = schedule.build_test_set(seed)?;
        let mut rng = seed::rng(seed::derive(seed, Stream::ModelInit, &[]));
        let initial = ModelParams::init(schedule.data.dim, schedule.hidden, schedule.classes, &mut rng)?;
        Ok(Self {
            schedule,
            seed,
            clients,
            test_set,
            initial,
        })
    }

    pub fn schedule(&self) -> &ScenarioSchedule {
        &self.schedule
    }

    pub fn schedule_mut(&mut self) -> &mut ScenarioSchedule {
        &mut self.schedule
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn clients(&self) -> &BTreeMap<usize, ClientDataset> {
        &self.clients
    }

    pub fn clients_mut(&mut self) -> &mut BTreeMap<usize, ClientDataset> {
        &mut self.clients
    }

    pub fn test_set(&self) -> &LabeledSet {
        &self.test_set
    }

    pub fn initial_params(&self) -> &ModelParams {
        &self.initial
    }

    pub fn round_config(&self, mode: Mode, execution: Execution) -> RoundConfig<'_> {
        RoundConfig {
            mode,
            train: self.schedule.train.with_seed(self.seed),
            self_train: self.schedule.self_train,
            monitor: self.schedule.monitor,
            aggregation: self.schedule.aggregation,
            execution,
            test_set: &self.test_set,
        }
    }

    /// Runs all rounds.
    pub fn run(&self, mode: Mode, execution: Execution) -> Result<Vec<RoundReport>> {
        let cfg = self.round_config(mode, execution);
        let mut state = ServerState::new(self.initial.clone());
        let mut reports = Vec::with_capacity(self.schedule.rounds);
        for t in 1..=self.schedule.rounds {
            let active: Vec<(usize, &ClientDataset)> = self
                .schedule
                .active_clients(t)?
                .into_iter()
                .map(|id| (id, &self.clients[&id]))
                .collect();
            let (next, report) = run_round(&state, &active, &cfg)?;
            state = next;
            reports.push(report);
        }
        Ok(reports)
    }
}

pub fn run_scenario(schedule: &ScenarioSchedule, mode: Mode, seed: u64) -> Result<Vec<RoundReport>> {
    Simulation::new(schedule.clone(), seed)?.run(mode, Execution::default())
}
