use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
rounds = 6
classes = 3
hidden = 8
seeds = [0, 1]

[data]
dim = 4
test_per_class = 20

[[clients]]
id = 0
counts = [40, 40, 40]

[[clients]]
id = 1
leave = 4
counts = [10, 10, 60]
"#;

fn fcvi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fcvi")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("scenario.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_small(dir: &Path, extra: &[&str]) -> String {
    let cfg = write_config(dir, SMALL);
    let out = dir.join("out");
    let out_s = out.to_str().unwrap().to_string();
    let mut args = vec!["run", &cfg, "--out", &out_s];
    args.extend_from_slice(extra);
    let o = fcvi(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    out_s
}

#[test]
fn validate_echoes_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fcvi(&["validate", &write_config(tmp.path(), SMALL)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("tau = 0.9"));
    assert!(text.contains("learning_rate = 0.05"));
    assert!(text.contains("leave = 7"));
}

#[test]
fn validation_failures_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let unknown = write_config(tmp.path(), &format!("{SMALL}\n[monitor]\nbogus = 1\n"));
    let o = fcvi(&["validate", &unknown]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bogus"));

    let bad = write_config(tmp.path(), &SMALL.replace("counts = [40, 40, 40]", "counts = [40, 40]"));
    let o = fcvi(&["run", &bad, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!tmp.path().join("o").exists());

    let ok = write_config(tmp.path(), SMALL);
    assert_eq!(fcvi(&["run", &ok, "--modes", "fedprox"]).status.code(), Some(1));
    assert_eq!(fcvi(&["run", &ok, "--seeds", "5..2"]).status.code(), Some(1));
    assert_eq!(fcvi(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(fcvi(&["validate", "/nonexistent.toml"]).status.code(), Some(1));
}

#[test]
fn run_writes_logs_curves_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_small(tmp.path(), &[]);
    let out = Path::new(&out);
    let curves = fs::read_to_string(out.join("curves.csv")).unwrap();
    let mut lines = curves.lines();
    assert_eq!(lines.next(), Some("round,mode,seed,accuracy,macro_precision,macro_recall,macro_f1"));
    assert_eq!(lines.count(), 3 * 2 * 6);

    let log = fs::read_to_string(out.join("runs/fcvi/1.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 7);
    assert_eq!(records[6]["status"], "DONE");
    for (i, r) in records[..6].iter().enumerate() {
        assert_eq!(r["round"], i + 1);
        for key in ["k", "active_clients", "carry_forward", "metrics"] {
            assert!(r.get(key).is_some(), "round {} lacks {key}", i + 1);
        }
        // Only the departure round is monitored.
        assert_eq!(r.get("monitor").is_some(), i + 1 == 4, "round {}", i + 1);
    }
    let m = &records[3]["monitor"];
    for key in ["R", "cases", "r_min", "mu"] {
        assert!(m.get(key).is_some(), "monitor lacks {key}");
    }

    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("mode,round,kind,seeds,accuracy_mean,accuracy_std"));
    // change round 4 and final round 6 per mode
    assert_eq!(summary.lines().count(), 1 + 3 * 2);
    assert!(out.join("resolved_config.toml").exists());
}

#[test]
fn monitor_every_round_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_small(tmp.path(), &["--modes", "fcvi", "--seeds", "3", "--monitor-every-round"]);
    let log = fs::read_to_string(Path::new(&out).join("runs/fcvi/3.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(records[0].get("monitor").is_none());
    assert!(records[1..6].iter().all(|r| r.get("monitor").is_some()));
    assert!(!Path::new(&out).join("runs/fedavg_supervised").exists());
}

#[test]
fn rerun_from_resolved_config_is_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_small(tmp.path(), &["--seeds", "0"]);
    let again = tmp.path().join("again");
    let o = fcvi(&[
        "run",
        &format!("{out}/resolved_config.toml"),
        "--out",
        again.to_str().unwrap(),
        "--sequential",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["curves.csv", "summary.csv", "resolved_config.toml", "runs/fcvi/0.jsonl"] {
        assert_eq!(
            fs::read(Path::new(&out).join(f)).unwrap(),
            fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn report_prints_delta_column() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_small(tmp.path(), &[]);
    let o = fcvi(&["report", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.contains("r4") && header.contains("r6") && header.contains('Δ'), "{header}");
    assert_eq!(text.lines().count(), 1 + 4 * 3);

    let single = tempfile::tempdir().unwrap();
    let out = run_small(single.path(), &["--modes", "fcvi"]);
    let text = String::from_utf8(fcvi(&["report", &out]).stdout).unwrap();
    assert!(!text.contains('Δ'));
}

#[test]
fn report_on_incomplete_runs_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fcvi(&["report", tmp.path().join("missing").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("resolved_config.toml"));

    let out = run_small(tmp.path(), &["--seeds", "0"]);
    let log = Path::new(&out).join("runs/fedavg_supervised/0.jsonl");
    let text = fs::read_to_string(&log).unwrap();
    let truncated: Vec<&str> = text.lines().take(3).collect();
    fs::write(&log, truncated.join("\n")).unwrap();
    let o = fcvi(&["report", &out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("fedavg_supervised/0.jsonl"), "{}", stderr(&o));

    fs::remove_file(Path::new(&out).join("curves.csv")).unwrap();
    fs::write(&log, text).unwrap();
    let o = fcvi(&["report", &out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("curves.csv"));
}
