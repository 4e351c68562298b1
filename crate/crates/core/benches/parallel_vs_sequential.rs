use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use wmfed_core::attacks::{forge, ForgeConfig, ForgeMode};
use wmfed_core::data::{load_splits, DatasetSource, Splits, SyntheticSpec};
use wmfed_core::federation::{run_federation, FederationConfig};
use wmfed_core::model::{ArchConfig, InputShape};
use wmfed_core::par::Execution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn small_splits() -> Splits {
    load_splits(&DatasetSource::Synthetic {
        spec: SyntheticSpec::gray28(1),
        train: 400,
        test: 100,
        holdout: 50,
        seed: 1,
    })
    .unwrap()
}

fn small_config(exec: Execution) -> FederationConfig {
    let mut cfg = FederationConfig {
        clients: 4,
        rounds: 1,
        execution: exec,
        ..FederationConfig::default()
    };
    cfg.train.local_epochs = 1;
    cfg
}

fn federation_round(c: &mut Criterion) {
    let splits = small_splits();
    let arch = ArchConfig::tiny_vgg(InputShape::new(28, 28, 1), 10);
    let mut group = c.benchmark_group("federation_round");
    group.sample_size(10);
    for (name, exec) in MODES {
        let cfg = small_config(exec);
        group.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| {
            b.iter(|| run_federation(cfg, &arch, &splits.train, &splits.test, None).unwrap())
        });
    }
    group.finish();
}

fn forge_attempts(c: &mut Criterion) {
    let splits = small_splits();
    let arch = ArchConfig::tiny_vgg(InputShape::new(28, 28, 1), 10);
    let ckpt = run_federation(&small_config(Execution::default()), &arch, &splits.train, &splits.test, None)
        .unwrap()
        .checkpoint();
    let fc = ForgeConfig {
        mode: ForgeMode::Untargeted,
        attempts: 8,
        steps: 20,
        ..ForgeConfig::default()
    };
    let mut group = c.benchmark_group("forge_attempts");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(name, |b| b.iter(|| forge(&ckpt, None, &fc, 0, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, federation_round, forge_attempts);
criterion_main!(benches);
