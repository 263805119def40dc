use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use skyfix::dataio::mask_flights;
use skyfix::exec::Execution;
use skyfix::pipeline::{run_localize, run_sync, PipelineConfig};
use skyfix::synth::{generate_scenario, ScenarioConfig};

fn bench(c: &mut Criterion) {
    let scenario = generate_scenario(&ScenarioConfig {
        seed: 7,
        n_sensors: 40,
        n_flights: 12,
        ..ScenarioConfig::default()
    })
    .unwrap();
    let cfg = PipelineConfig::default();
    let (masked, _) = mask_flights(&scenario.set, cfg.mask_fraction, cfg.mask_seed).unwrap();
    let (state, _) = run_sync(&masked, &cfg, Execution::Parallel).unwrap();

    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    for exec in [Execution::Parallel, Execution::Sequential] {
        let name = format!("{exec:?}").to_lowercase();
        group.bench_function(BenchmarkId::new("sync", &name), |b| b.iter(|| run_sync(&masked, &cfg, exec).unwrap()));
        group.bench_function(BenchmarkId::new("localize", &name), |b| b.iter(|| run_localize(&masked, &state, &cfg, exec)));
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
