//! The `report` command: seed-mean metrics per mode at the sampled rounds,
//! with a Δ column against the other modes.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use fcvi_core::federation::Mode;
use serde::Deserialize;

use crate::config::ScenarioFile;
use crate::run::{log_path, mean_std, CURVES, METRICS, RESOLVED_CONFIG};
use crate::CliError;

#[derive(Debug, Deserialize)]
struct CurveRecord {
    round: usize,
    mode: Mode,
    seed: u64,
    accuracy: f64,
    macro_precision: f64,
    macro_recall: f64,
    macro_f1: f64,
}

impl CurveRecord {
    fn values(&self) -> [f64; 4] {
        [self.accuracy, self.macro_precision, self.macro_recall, self.macro_f1]
    }
}

/// Seed means of one mode: `values[metric][sample]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeTable {
    pub mode: Mode,
    pub values: Vec<Vec<f64>>,
}

impl ModeTable {
    /// Average over the sampled rounds.
    pub fn average(&self, metric: usize) -> f64 {
        mean_std(&self.values[metric]).0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub sample_rounds: Vec<usize>,
    pub modes: Vec<ModeTable>,
}

impl Report {
    /// Mode the Δ column is measured from: `fcvi` when present.
    pub fn reference(&self) -> Option<&ModeTable> {
        if self.modes.len() < 2 {
            return None;
        }
        self.modes.iter().find(|m| m.mode == Mode::Fcvi).or(self.modes.first())
    }

    /// Reference average minus `mode`'s average, per metric.
    pub fn delta(&self, metric: usize, mode: &ModeTable) -> Option<f64> {
        let r = self.reference()?;
        (r.mode != mode.mode).then(|| r.average(metric) - mode.average(metric))
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let has_delta = self.reference().is_some();
        let _ = write!(s, "{:<17} {:<26}", "metric", "mode");
        for r in &self.sample_rounds {
            let _ = write!(s, " {:>8}", format!("r{r}"));
        }
        let _ = write!(s, " {:>8}", "mean");
        if has_delta {
            let _ = write!(s, " {:>8}", "Δ");
        }
        s.push('\n');
        for (i, metric) in METRICS.iter().enumerate() {
            for m in &self.modes {
                let _ = write!(s, "{:<17} {:<26}", metric, m.mode.as_str());
                for v in &m.values[i] {
                    let _ = write!(s, " {v:>8.4}");
                }
                let _ = write!(s, " {:>8.4}", m.average(i));
                if has_delta {
                    match self.delta(i, m) {
                        Some(d) => {
                            let _ = write!(s, " {d:>+8.4}");
                        }
                        None => {
                            let _ = write!(s, " {:>8}", "");
                        }
                    }
                }
                s.push('\n');
            }
        }
        s
    }
}

fn missing(path: &Path, what: &str) -> CliError {
    CliError::Runtime(format!("incomplete run: {what} {}", path.display()))
}

fn check_done(path: &Path) -> Result<(), CliError> {
    let file = std::fs::File::open(path).map_err(|_| missing(path, "missing"))?;
    let last = BufReader::new(file)
        .lines()
        .map_while(Result::ok)
        .filter(|l| !l.trim().is_empty())
        .last();
    let done = last
        .and_then(|l| serde_json::from_str::<serde_json::Value>(&l).ok())
        .is_some_and(|v| v.get("status").and_then(|s| s.as_str()) == Some("DONE"));
    if done {
        Ok(())
    } else {
        Err(missing(path, "no DONE record in"))
    }
}

pub fn load(dir: &Path) -> Result<Report, CliError> {
    let config_path = dir.join(RESOLVED_CONFIG);
    if !config_path.exists() {
        return Err(missing(&config_path, "missing"));
    }
    let cfg = ScenarioFile::load(&config_path)?;
    for &m in &cfg.modes {
        for &s in &cfg.seeds {
            check_done(&log_path(dir, m, s))?;
        }
    }
    let curves_path = dir.join(CURVES);
    let mut reader = csv::Reader::from_path(&curves_path).map_err(|_| missing(&curves_path, "missing"))?;
    let mut records = Vec::new();
    for r in reader.deserialize::<CurveRecord>() {
        records.push(r.map_err(|e| CliError::Runtime(format!("{}: {e}", curves_path.display())))?);
    }
    let mut modes = Vec::new();
    for &mode in &cfg.modes {
        let mut values = vec![Vec::new(); METRICS.len()];
        for &round in &cfg.report.sample_rounds {
            let at: Vec<&CurveRecord> = records.iter().filter(|r| r.mode == mode && r.round == round).collect();
            let seeds: Vec<u64> = at.iter().map(|r| r.seed).collect();
            if cfg.seeds.iter().any(|s| !seeds.contains(s)) {
                return Err(missing(&curves_path, &format!("round {round} of {mode} incomplete in")));
            }
            for (i, col) in values.iter_mut().enumerate() {
                col.push(mean_std(&at.iter().map(|r| r.values()[i]).collect::<Vec<_>>()).0);
            }
        }
        modes.push(ModeTable { mode, values });
    }
    Ok(Report {
        sample_rounds: cfg.report.sample_rounds.clone(),
        modes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(mode: Mode, acc: Vec<f64>) -> ModeTable {
        let n = acc.len();
        ModeTable {
            mode,
            values: vec![acc, vec![0.0; n], vec![0.0; n], vec![0.5; n]],
        }
    }

    #[test]
    fn single_mode_has_no_delta() {
        let r = Report {
            sample_rounds: vec![5, 10],
            modes: vec![table(Mode::Fcvi, vec![0.5, 0.7])],
        };
        assert!(r.reference().is_none());
        assert!(!r.render().contains('Δ'));
    }

    #[test]
    fn delta_is_difference_of_means() {
        let r = Report {
            sample_rounds: vec![5, 10],
            modes: vec![
                table(Mode::FedavgSupervised, vec![0.4, 0.6]),
                table(Mode::Fcvi, vec![0.5, 0.9]),
            ],
        };
        let d = r.delta(0, &r.modes[0]).unwrap();
        assert!((d - 0.2).abs() < 1e-12);
        assert_eq!(r.delta(0, &r.modes[1]), None);
        let text = r.render();
        assert!(text.contains('Δ'));
        assert!(text.contains("+0.2000"));
        assert_eq!(text.lines().count(), 1 + 4 * 2);
    }
}
