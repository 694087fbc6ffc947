//! The `run` command: every (mode, seed) pair of a resolved scenario, with
//! round logs, curves and a per-mode summary.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fcvi_core::federation::{Mode, RoundReport, Simulation};
use fcvi_core::Execution;
use serde::Serialize;

use crate::config::Resolved;
use crate::CliError;

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const CURVES: &str = "curves.csv";
pub const SUMMARY: &str = "summary.csv";

pub fn log_path(out: &Path, mode: Mode, seed: u64) -> PathBuf {
    out.join("runs").join(mode.as_str()).join(format!("{seed}.jsonl"))
}

/// Last line of every complete round log.
#[derive(Debug, Serialize)]
struct Done {
    status: &'static str,
    mode: Mode,
    seed: u64,
    rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub round: usize,
    pub mode: Mode,
    pub seed: u64,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

impl CurveRow {
    fn new(mode: Mode, seed: u64, r: &RoundReport) -> Self {
        Self {
            round: r.round,
            mode,
            seed,
            accuracy: r.metrics.accuracy,
            macro_precision: r.metrics.macro_precision,
            macro_recall: r.metrics.macro_recall,
            macro_f1: r.metrics.macro_f1,
        }
    }

    pub fn values(&self) -> [f64; 4] {
        [self.accuracy, self.macro_precision, self.macro_recall, self.macro_f1]
    }
}

pub const METRICS: [&str; 4] = ["accuracy", "macro_precision", "macro_recall", "macro_f1"];

#[derive(Debug, Serialize)]
struct SummaryRow {
    mode: Mode,
    round: usize,
    kind: &'static str,
    seeds: usize,
    accuracy_mean: f64,
    accuracy_std: f64,
    macro_precision_mean: f64,
    macro_precision_std: f64,
    macro_recall_mean: f64,
    macro_recall_std: f64,
    macro_f1_mean: f64,
    macro_f1_std: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn runtime(context: impl std::fmt::Display, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{context}: {e}"))
}

fn write_log(path: &Path, mode: Mode, seed: u64, reports: &[RoundReport]) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(|e| runtime(path.display(), e))?;
    let mut w = BufWriter::new(file);
    for r in reports {
        serde_json::to_writer(&mut w, r).map_err(|e| runtime(path.display(), e))?;
        w.write_all(b"\n").map_err(|e| runtime(path.display(), e))?;
    }
    let done = Done {
        status: "DONE",
        mode,
        seed,
        rounds: reports.len(),
    };
    serde_json::to_writer(&mut w, &done).map_err(|e| runtime(path.display(), e))?;
    w.write_all(b"\n").map_err(|e| runtime(path.display(), e))?;
    w.flush().map_err(|e| runtime(path.display(), e))
}

/// Runs the scenario and writes all outputs under `out`. Returns the curve
/// rows in (mode, seed, round) order.
pub fn run(resolved: &Resolved, out: &Path, execution: Execution) -> Result<Vec<CurveRow>, CliError> {
    let file = &resolved.file;
    for m in &file.modes {
        let dir = out.join("runs").join(m.as_str());
        fs::create_dir_all(&dir).map_err(|e| runtime(dir.display(), e))?;
    }
    let config_path = out.join(RESOLVED_CONFIG);
    fs::write(&config_path, resolved.to_toml()).map_err(|e| runtime(config_path.display(), e))?;

    let jobs: Vec<(Mode, u64)> = file
        .modes
        .iter()
        .flat_map(|&m| file.seeds.iter().map(move |&s| (m, s)))
        .collect();
    // Data is generated once per seed and shared by the modes.
    let sims: Vec<Simulation> = execution
        .map(&file.seeds, |&s| Simulation::new(resolved.schedule.clone(), s))
        .into_iter()
        .collect::<Result<_, _>>()
        .map_err(|e| runtime("building scenario data", e))?;
    let results = execution.map(&jobs, |&(mode, seed)| -> Result<Vec<CurveRow>, CliError> {
        let idx = file.seeds.iter().position(|&s| s == seed).expect("seed is listed");
        log::info!("running {mode} seed {seed}");
        let reports = sims[idx]
            .run(mode, execution)
            .map_err(|e| runtime(format!("{mode} seed {seed}"), e))?;
        write_log(&log_path(out, mode, seed), mode, seed, &reports)?;
        Ok(reports.iter().map(|r| CurveRow::new(mode, seed, r)).collect())
    });
    let mut rows = Vec::with_capacity(jobs.len() * file.rounds);
    for r in results {
        rows.extend(r?);
    }
    write_curves(&out.join(CURVES), &rows)?;
    write_summary(&out.join(SUMMARY), resolved, &rows)?;
    Ok(rows)
}

fn write_curves(path: &Path, rows: &[CurveRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| runtime(path.display(), e))?;
    for r in rows {
        w.serialize(r).map_err(|e| runtime(path.display(), e))?;
    }
    w.flush().map_err(|e| runtime(path.display(), e))
}

fn write_summary(path: &Path, resolved: &Resolved, rows: &[CurveRow]) -> Result<(), CliError> {
    let file = &resolved.file;
    let mut points: Vec<(usize, &'static str)> = resolved
        .schedule
        .change_rounds()
        .into_iter()
        .map(|r| (r, "change"))
        .collect();
    points.push((file.rounds, "final"));
    let mut w = csv::Writer::from_path(path).map_err(|e| runtime(path.display(), e))?;
    for &mode in &file.modes {
        for &(round, kind) in &points {
            let at: Vec<&CurveRow> = rows.iter().filter(|r| r.mode == mode && r.round == round).collect();
            let stat = |i: usize| mean_std(&at.iter().map(|r| r.values()[i]).collect::<Vec<_>>());
            let [(am, asd), (pm, psd), (rm, rsd), (fm, fsd)] = [stat(0), stat(1), stat(2), stat(3)];
            w.serialize(SummaryRow {
                mode,
                round,
                kind,
                seeds: at.len(),
                accuracy_mean: am,
                accuracy_std: asd,
                macro_precision_mean: pm,
                macro_precision_std: psd,
                macro_recall_mean: rm,
                macro_recall_std: rsd,
                macro_f1_mean: fm,
                macro_f1_std: fsd,
            })
            .map_err(|e| runtime(path.display(), e))?;
        }
    }
    w.flush().map_err(|e| runtime(path.display(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_sample_std() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn log_paths() {
        let p = log_path(Path::new("out"), Mode::FedavgSupervised, 3);
        assert_eq!(p, Path::new("out/runs/fedavg_supervised/3.jsonl"));
    }
}
