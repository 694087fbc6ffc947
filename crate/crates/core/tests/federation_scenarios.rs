use fcvi_core::dataset::*;
use fcvi_core::federation::*;
use fcvi_core::monitor::{ClassCase, MonitorThresholds};
use fcvi_core::nn::{ModelParams, TrainConfig};
use fcvi_core::seed;
use fcvi_core::selftrain::SelfTrainConfig;
use fcvi_core::Execution;
use proptest::prelude::*;

fn schedule(rounds: usize, classes: usize, clients: Vec<ClientSpec>) -> ScenarioSchedule {
    ScenarioSchedule {
        rounds,
        classes,
        hidden: 16,
        data: DataConfig { dim: 8, test_per_class: 40, ..DataConfig::default() },
        train: TrainConfig::new(0.05, 16, 1, 0).unwrap(),
        monitor: MonitorThresholds::default(),
        self_train: SelfTrainConfig::default(),
        aggregation: AggregationWeights::Uniform,
        clients,
    }
}

fn client(id: usize, join: usize, leave: usize, counts: Vec<usize>) -> ClientSpec {
    ClientSpec { id, join, leave, counts }
}

/// Class 2 is held only by client 2, which leaves at round 4.
fn vanish_schedule() -> ScenarioSchedule {
    schedule(
        6,
        3,
        vec![
            client(0, 1, 7, vec![60, 60, 0]),
            client(1, 1, 7, vec![40, 80, 0]),
            client(2, 1, 4, vec![20, 20, 120]),
        ],
    )
}

#[test]
fn vanished_class_row_is_carried_forward() {
    let sched = vanish_schedule();
    assert_eq!(sched.true_class_counts(4).unwrap()[2], 0);
    for s in 0..5 {
        let r = run_scenario(&sched, Mode::Fcvi, s).unwrap();
        let change = &r[3];
        let m = change.monitor.as_ref().expect("monitor runs on client-count change");
        assert_eq!(m.cases[2], ClassCase::Vanished, "seed {s}");
        assert_eq!(change.carry_forward, vec![2]);
        let before = &r[2].aggregated;
        assert_eq!(change.aggregated.output_row(2).unwrap(), before.output_row(2).unwrap());
        for l in 0..2 {
            assert_ne!(change.aggregated.output_row(l).unwrap(), before.output_row(l).unwrap());
        }
    }
}

#[test]
fn monitor_runs_exactly_on_count_changes() {
    let sched = schedule(
        8,
        3,
        vec![
            client(0, 1, 9, vec![40, 40, 40]),
            client(1, 3, 6, vec![40, 40, 40]),
            client(2, 5, 9, vec![40, 40, 40]),
        ],
    );
    let changes = sched.change_rounds();
    assert_eq!(changes, vec![3, 5, 6]);
    let r = run_scenario(&sched, Mode::Fcvi, 1).unwrap();
    for rep in &r {
        assert_eq!(rep.monitor.is_some(), changes.contains(&rep.round), "round {}", rep.round);
    }
    for mode in [Mode::FedavgSupervised, Mode::FedavgSelftrainUniform] {
        assert!(run_scenario(&sched, mode, 1).unwrap().iter().all(|r| r.monitor.is_none()));
    }
}

#[test]
fn every_round_flag_monitors_from_round_two() {
    let mut sched = vanish_schedule();
    sched.monitor.every_round = true;
    let r = run_scenario(&sched, Mode::Fcvi, 2).unwrap();
    assert!(r[0].monitor.is_none());
    assert!(r[1..].iter().all(|x| x.monitor.is_some()));
}

#[test]
fn runs_are_deterministic_across_execution_modes() {
    let sim = Simulation::new(vanish_schedule(), 7).unwrap();
    for mode in Mode::ALL {
        let a = sim.run(mode, Execution::Sequential).unwrap();
        let b = sim.run(mode, Execution::Parallel).unwrap();
        let c = sim.run(mode, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(b, c);
    }
}

#[test]
fn supervised_ignores_unlabeled_data() {
    let mut sim = Simulation::new(vanish_schedule(), 3).unwrap();
    let before = sim.run(Mode::FedavgSupervised, Execution::Sequential).unwrap();
    for c in sim.clients_mut().values_mut() {
        c.unlabeled.features_mut().mapv_inplace(|v| -3.0 * v + 1.0);
    }
    let after = sim.run(Mode::FedavgSupervised, Execution::Sequential).unwrap();
    assert_eq!(before, after);
    assert!(after.iter().all(|r| r.self_train.is_empty()));
}

#[test]
fn threshold_above_one_matches_supervised_without_vanishing() {
    let sched = schedule(
        8,
        3,
        vec![
            client(0, 1, 9, vec![50, 50, 50]),
            client(1, 3, 9, vec![80, 20, 40]),
            client(2, 1, 6, vec![10, 60, 30]),
        ],
    );
    let mut sim = Simulation::new(sched, 4).unwrap();
    // past validation: no probability can reach it
    sim.schedule_mut().self_train.tau = 1.5;
    let fcvi = sim.run(Mode::Fcvi, Execution::Sequential).unwrap();
    let sup = sim.run(Mode::FedavgSupervised, Execution::Sequential).unwrap();
    for (a, b) in fcvi.iter().zip(&sup) {
        assert!(a.carry_forward.is_empty());
        assert_eq!(a.aggregated, b.aggregated);
        assert_eq!(a.metrics, b.metrics);
    }
}

#[test]
fn single_client_matches_centralized_training() {
    let sched = schedule(4, 3, vec![client(0, 1, 5, vec![30, 30, 30])]);
    let sim = Simulation::new(sched, 5).unwrap();
    let r = sim.run(Mode::FedavgSupervised, Execution::Sequential).unwrap();
    let data = &sim.clients()[&0];
    let base = sim.schedule().train.with_seed(5);
    let mut theta = sim.initial_params().clone();
    for t in 1..=4u64 {
        let tc = base.with_seed(seed::derive(5, seed::Stream::LocalTraining, &[t, 0]));
        theta = theta.train_local(&data.labeled, &tc).unwrap();
    }
    assert_eq!(r[3].aggregated, theta);
}

#[test]
fn uniform_mode_self_trains_every_round() {
    let r = run_scenario(&vanish_schedule(), Mode::FedavgSelftrainUniform, 0).unwrap();
    assert!(r.iter().all(|x| !x.self_train.is_empty()));
    assert!(r.iter().all(|x| x.carry_forward.is_empty()));
}

#[test]
fn rejects_round_without_clients() {
    let sched = schedule(5, 2, vec![client(0, 1, 3, vec![10, 10])]);
    assert!(Simulation::new(sched, 0).is_err());
}

fn random_params(n: usize, seed_: u64) -> Vec<ModelParams> {
    let mut rng = seed::rng(seed_);
    (0..n).map(|_| ModelParams::init(3, 4, 3, &mut rng).unwrap()).collect()
}

fn normalized(raw: &[f64]) -> Vec<f64> {
    let sum: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.iter().map(|v| v / sum).collect();
    let head: f64 = w[1..].iter().sum();
    w[0] = 1.0 - head;
    w
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn aggregate_is_convex(raw in prop::collection::vec(0.01f64..1.0, 1..6), seed_ in any::<u64>()) {
        let ps = random_params(raw.len(), seed_);
        let w = normalized(&raw);
        prop_assume!(w[0] >= 0.0);
        let refs: Vec<&ModelParams> = ps.iter().collect();
        let agg = aggregate(&refs, &w).unwrap();
        let cols: Vec<Vec<f64>> = ps.iter().map(|p| p.values().copied().collect()).collect();
        for (j, v) in agg.values().enumerate() {
            let lo = cols.iter().map(|c| c[j]).fold(f64::INFINITY, f64::min);
            let hi = cols.iter().map(|c| c[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
    }

    #[test]
    fn aggregate_updates_ignores_input_order(
        raw in prop::collection::vec(0.01f64..1.0, 2..6),
        seed_ in any::<u64>(),
        rot in 0usize..5,
    ) {
        let ps = random_params(raw.len(), seed_);
        let w = normalized(&raw);
        prop_assume!(w[0] >= 0.0);
        let mut updates: Vec<ClientUpdate> = ps
            .into_iter()
            .zip(&w)
            .enumerate()
            .map(|(id, (params, &weight))| ClientUpdate { client_id: id, params, weight })
            .collect();
        let a = aggregate_updates(&updates).unwrap();
        let k = updates.len();
        updates.rotate_left(rot % k);
        updates.reverse();
        prop_assert_eq!(aggregate_updates(&updates).unwrap(), a);
    }
}
