use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ovsfda_core::harness::{generate_synthetic_domains, predict, Exec, SyntheticDatasetSpec};
use ovsfda_core::model::{BackboneParams, ModelConfig, Vocabulary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_predict(c: &mut Criterion) {
    let spec = SyntheticDatasetSpec {
        source_samples: 1,
        source_val_samples: 1,
        target_train_samples: 1,
        target_val_samples: 8,
        ..SyntheticDatasetSpec::default()
    };
    let d = generate_synthetic_domains(&spec, 1).unwrap();
    let images = d.target_val.images();
    let cfg = ModelConfig::default();
    let params = BackboneParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let vocab = Vocabulary::with_default_templates(spec.target_names(), &cfg).unwrap();

    let mut g = c.benchmark_group("predict_8x64x64");
    g.sample_size(10);
    for (name, exec) in [("parallel", Exec::Parallel), ("sequential", Exec::Sequential)] {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| predict(&params, None, &vocab, &images, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_predict);
criterion_main!(benches);
