use std::time::Duration;

use criterion::{criterion_group, criterion_main, Criterion};
use iman_core::dataio::{generate_domains, SyntheticSpec};
use iman_core::pipeline::{pretrain, ModelState, TrainConfig};

fn pretraining(c: &mut Criterion) {
    let d = generate_domains(&SyntheticSpec::default()).unwrap();
    let mut group = c.benchmark_group("training");
    group
        .sample_size(10)
        .measurement_time(Duration::from_secs(20));
    for (name, alpha) in [
        ("pretrain_epoch_source_only", 0.0),
        ("pretrain_epoch_with_mmd", 10.0),
    ] {
        let mut cfg = TrainConfig {
            epochs_pretrain: 1,
            ..TrainConfig::default()
        };
        cfg.weights.alpha = alpha;
        let init = ModelState::new(&cfg.layer_dims, d.source.classes(), 0).unwrap();
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut model = init.clone();
                pretrain(&d.source, &d.target, &mut model, &cfg).unwrap();
                model
            })
        });
    }
    group.finish();
}

criterion_group!(benches, pretraining);
criterion_main!(benches);
