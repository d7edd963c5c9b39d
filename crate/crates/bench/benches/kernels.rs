use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use deminet::data::{prepare_dataset, synth_generate, SampleConfig, SynthConfig};
use deminet::experiment::tables;
use deminet::hga::{hga_forward, HgaParams};
use deminet::metrics::auc;
use deminet::model::{HyperParams, Model};
use deminet::numerics::{Binder, ParamStore, Tape, Tensor};
use deminet::rng::SeedStreams;
use deminet::seqgraph::build_hetero_graph;
use deminet::training::Trainer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn graph(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let seq = random(&mut rng, 20, 16);
    c.bench_function("build_hetero_graph n=20 d=16", |b| {
        b.iter(|| build_hetero_graph(&seq, 3, 0.7).unwrap())
    });
}

fn hga(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let seq = random(&mut rng, 20, 16);
    let g = build_hetero_graph(&seq, 3, 0.2).unwrap();
    let mut store = ParamStore::new();
    let params = HgaParams::register(&mut store, &mut rng, 16, 4, 2, 20).unwrap();
    c.bench_function("hga forward+backward n=20 d=16 L=2", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&store);
            let vars = params.bind(&mut tape, &mut binder, &store);
            let h0 = tape.constant(seq.clone());
            let (h, _) = hga_forward(&mut tape, &g.full_view(), h0, &vars, 0.01).unwrap();
            let loss = tape.sum(h).unwrap();
            tape.backward(loss).unwrap();
        })
    });
}

fn train_step(c: &mut Criterion) {
    let synth = SynthConfig {
        num_users: 200,
        ..SynthConfig::default()
    };
    let (log, _) = synth_generate(&synth, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let data = prepare_dataset(&log, 0.8, &SampleConfig::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let model = Model::new(HyperParams::default(), tables(&data.vocab), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let batch = data.train[..64].to_vec();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("train_step batch=64", |b| {
        b.iter_batched(
            || Trainer::new(model.clone(), &SeedStreams::new(6)),
            |mut t| t.train_step(&batch).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.bench_function("predict batch=64", |b| b.iter(|| model.predict(&batch).unwrap()));
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let scores: Vec<(f64, u8)> = (0..10_000).map(|_| (rng.random(), rng.random_range(0..2))).collect();
    c.bench_function("auc m=10000", |b| b.iter(|| auc(&scores).unwrap()));
}

criterion_group!(benches, graph, hga, train_step, metrics);
criterion_main!(benches);
