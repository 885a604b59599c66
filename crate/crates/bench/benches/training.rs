use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use typhoon_bench::{random_batch, random_table};
use typhoon_core::classifier::HeadConfig;
use typhoon_core::features::SentimentConfig;
use typhoon_core::trainer::{train_step, AdamState, JointConfig, JointModel, LabeledSeq, TrainItem, TrainMode};

fn bench_train_step(c: &mut Criterion) {
    let table = random_table(500, 32, 0);
    let (slots, labeled) = random_batch(32, 8, 12, table.vocab.len(), 1);
    let items: Vec<TrainItem> = (0..slots.len()).map(TrainItem::Real).collect();
    let refs: Vec<&LabeledSeq> = labeled.iter().collect();
    let cfg = JointConfig::default();

    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for mode in [TrainMode::StandaloneEnvOnly, TrainMode::Joint] {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = JointModel::new(
            mode,
            5,
            Some(&table),
            &SentimentConfig::default(),
            &HeadConfig::default(),
            &mut rng,
        )
        .unwrap();
        let mut adam = AdamState::new(&model.store);
        group.bench_function(format!("{mode:?}"), |bench| {
            bench.iter(|| train_step(&mut model, &mut adam, &slots, &items, &refs, &cfg, &mut rng).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_train_step);
criterion_main!(benches);
