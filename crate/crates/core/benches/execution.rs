use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fcvi_core::dataset::{ClientDataset, ClientSpec, DataConfig, ScenarioSchedule};
use fcvi_core::federation::{run_round, AggregationWeights, Mode, ServerState, Simulation};
use fcvi_core::monitor::MonitorThresholds;
use fcvi_core::nn::TrainConfig;
use fcvi_core::selftrain::SelfTrainConfig;
use fcvi_core::Execution;

fn schedule(clients: usize, rounds: usize) -> ScenarioSchedule {
    ScenarioSchedule {
        rounds,
        classes: 10,
        hidden: 64,
        data: DataConfig::default(),
        train: TrainConfig::new(0.05, 32, 1, 0).unwrap(),
        monitor: MonitorThresholds::default(),
        self_train: SelfTrainConfig::default(),
        aggregation: AggregationWeights::Uniform,
        clients: (0..clients)
            .map(|id| ClientSpec {
                id,
                join: 1,
                leave: rounds + 1,
                counts: (0..10).map(|c| if c % clients == id % 10 { 200 } else { 50 }).collect(),
            })
            .collect(),
    }
}

fn round(c: &mut Criterion) {
    let mut group = c.benchmark_group("round");
    group.sample_size(10);
    for k in [2usize, 6, 12] {
        let sim = Simulation::new(schedule(k, 1), 0).unwrap();
        let clients: Vec<(usize, &ClientDataset)> = sim.clients().iter().map(|(id, d)| (*id, d)).collect();
        let state = ServerState::new(sim.initial_params().clone());
        for exec in [Execution::Sequential, Execution::Parallel] {
            let cfg = sim.round_config(Mode::Fcvi, exec);
            group.bench_with_input(BenchmarkId::new(format!("{exec:?}"), k), &k, |b, _| {
                b.iter(|| run_round(&state, &clients, &cfg).unwrap())
            });
        }
    }
    group.finish();
}

fn full_run(c: &mut Criterion) {
    let mut group = c.benchmark_group("run_10_rounds");
    group.sample_size(10);
    let sim = Simulation::new(schedule(6, 10), 0).unwrap();
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_function(format!("{exec:?}"), |b| b.iter(|| sim.run(Mode::Fcvi, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, round, full_run);
criterion_main!(benches);
