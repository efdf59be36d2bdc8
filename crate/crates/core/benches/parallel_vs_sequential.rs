use criterion::{criterion_group, criterion_main, Criterion};
use deps::numeric::{Gradients, Tape};
use deps::parallel::{map_chunks, map_chunks_sequential};
use deps::pipeline::{self, RunConfig};
use deps::recommender::DepsModel;
use deps::training::{unbiased_loss, IpsMode, Propensities, Sample, TrainingData};

fn chunk_grads(model: &DepsModel, chunk: &[Sample]) -> (Gradients, f64) {
    let refs: Vec<&Sample> = chunk.iter().collect();
    let props = vec![
        Propensities {
            item_view: 0.2,
            user_view: 0.4
        };
        chunk.len()
    ];
    let mut tape = Tape::new();
    let loss = unbiased_loss(&mut tape, model, &refs, &props, IpsMode::Dual, 0.5, 0.05, None).expect("loss");
    (tape.backward(loss).expect("backward"), tape.scalar(loss))
}

fn reduce(model: &DepsModel, parts: Vec<(Gradients, f64)>) -> f64 {
    let mut g = Gradients::new(model.store.len());
    let mut total = 0.0;
    for (p, v) in parts {
        g.merge(&p);
        total += v;
    }
    total
}

fn bench(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let (_, sim) = pipeline::simulate(&cfg).expect("simulate");
    let split = pipeline::split(&cfg, &sim.log).expect("split");
    let data = TrainingData::from_log(&split.train, cfg.model.max_len);
    let model = DepsModel::new(cfg.model, data.user_count, data.item_count, 0.05, 0).expect("model");
    let batch: Vec<Sample> = data.samples.iter().take(256).cloned().collect();
    let chunk = cfg.training.chunk_size;

    let mut group = c.benchmark_group("weighted_loss_gradients_256");
    group.sample_size(10);
    group.bench_function("sequential", |b| {
        b.iter(|| {
            reduce(
                &model,
                map_chunks_sequential(&batch, chunk, |_, s| chunk_grads(&model, s)),
            )
        })
    });
    group.bench_function("map_chunks", |b| {
        b.iter(|| reduce(&model, map_chunks(&batch, chunk, |_, s| chunk_grads(&model, s))))
    });
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
