//! Scenario files.
//!
//! A scenario is a TOML document. Every key except `[[clients]]` has a
//! default, unknown keys are rejected, and the resolved form (defaults and
//! command-line overrides filled in) is what gets written next to a run's
//! outputs. See `docs/config.md` for the full key list.

use std::path::Path;

use fcvi_core::dataset::{ClientSpec, DataConfig, ScenarioSchedule};
use fcvi_core::federation::{AggregationWeights, Mode};
use fcvi_core::monitor::MonitorThresholds;
use fcvi_core::nn::TrainConfig;
use fcvi_core::selftrain::SelfTrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 32,
            local_epochs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Rounds shown by `report`. Empty means the change rounds plus the
    /// final round.
    pub sample_rounds: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientEntry {
    pub id: usize,
    #[serde(default = "first_round")]
    pub join: usize,
    /// First round without the client. Absent means it never leaves.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leave: Option<usize>,
    pub counts: Vec<usize>,
}

fn first_round() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioFile {
    pub rounds: usize,
    pub classes: usize,
    pub hidden: usize,
    pub seeds: Vec<u64>,
    pub modes: Vec<Mode>,
    pub aggregation: AggregationWeights,
    pub data: DataConfig,
    pub train: TrainSection,
    pub monitor: MonitorThresholds,
    pub self_train: SelfTrainConfig,
    pub report: ReportSection,
    pub clients: Vec<ClientEntry>,
}

impl Default for ScenarioFile {
    fn default() -> Self {
        Self {
            rounds: 60,
            classes: 10,
            hidden: 64,
            seeds: (0..10).collect(),
            modes: Mode::ALL.to_vec(),
            aggregation: AggregationWeights::Uniform,
            data: DataConfig::default(),
            train: TrainSection::default(),
            monitor: MonitorThresholds::default(),
            self_train: SelfTrainConfig::default(),
            report: ReportSection::default(),
            clients: Vec::new(),
        }
    }
}

/// Command-line settings that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub modes: Option<Vec<Mode>>,
    pub seeds: Option<Vec<u64>>,
    pub monitor_every_round: bool,
}

/// A validated scenario ready to run.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub file: ScenarioFile,
    pub schedule: ScenarioSchedule,
}

impl Resolved {
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.file).expect("scenario files always serialize")
    }
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(e.to_string().trim_end().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn apply(mut self, o: &Overrides) -> Self {
        if let Some(m) = &o.modes {
            self.modes = m.clone();
        }
        if let Some(s) = &o.seeds {
            self.seeds = s.clone();
        }
        if o.monitor_every_round {
            self.monitor.every_round = true;
        }
        self
    }

    /// Fills every default, checks the schedule and builds it.
    pub fn resolve(mut self) -> Result<Resolved, CliError> {
        let invalid = |key: &str, msg: String| CliError::Validation(format!("invalid value for `{key}`: {msg}"));
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required".into()));
        }
        if self.modes.is_empty() {
            return Err(invalid("modes", "at least one mode is required".into()));
        }
        let mut seen = Vec::new();
        for m in &self.modes {
            if seen.contains(m) {
                return Err(invalid("modes", format!("`{m}` listed twice")));
            }
            seen.push(*m);
        }
        let mut uniq = self.seeds.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != self.seeds.len() {
            return Err(invalid("seeds", "seeds must be distinct".into()));
        }
        for c in &mut self.clients {
            c.leave.get_or_insert(self.rounds + 1);
        }
        let train = TrainConfig::new(self.train.learning_rate, self.train.batch_size, self.train.local_epochs, 0)
            .map_err(|e| invalid("train", e.to_string()))?;
        let schedule = ScenarioSchedule {
            rounds: self.rounds,
            classes: self.classes,
            hidden: self.hidden,
            data: self.data.clone(),
            train,
            monitor: self.monitor,
            self_train: self.self_train,
            aggregation: self.aggregation,
            clients: self
                .clients
                .iter()
                .map(|c| ClientSpec {
                    id: c.id,
                    join: c.join,
                    leave: c.leave.unwrap_or(self.rounds + 1),
                    counts: c.counts.clone(),
                })
                .collect(),
        };
        schedule.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        if self.report.sample_rounds.is_empty() {
            let mut rounds = schedule.change_rounds();
            rounds.push(self.rounds);
            rounds.dedup();
            self.report.sample_rounds = rounds;
        }
        if let Some(&r) = self.report.sample_rounds.iter().find(|&&r| r == 0 || r > self.rounds) {
            return Err(invalid("report.sample_rounds", format!("round {r} outside 1..={}", self.rounds)));
        }
        Ok(Resolved { file: self, schedule })
    }
}

/// Parses `0,1,5` or `0..10` (half-open) or a mix like `0..3,7`.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Validation(format!("invalid seed list `{spec}`"));
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once("..") {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                if a >= b {
                    return Err(bad());
                }
                out.extend(a..b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

pub fn parse_modes(spec: &str) -> Result<Vec<Mode>, CliError> {
    spec.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<Mode>().map_err(CliError::Validation))
        .collect()
}
