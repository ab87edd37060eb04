use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tabflow::nn::AdamConfig;
use tabflow::par;
use tabflow::sampler::{sample, SampleRun};
use tabflow::toy::{generate, ToyKind};
use tabflow::train::Trainable;
use tabflow::vfm::{TabbyFlow, TabbyFlowConfig};
use tabflow::{Codec, Schedule};

fn model() -> (TabbyFlow, Array2<f64>) {
    let table = generate(ToyKind::AdultLike, 4096, 1).unwrap();
    let codec = Codec::fit(&table).unwrap();
    let data = codec.encode(&table).unwrap().values;
    let cfg = TabbyFlowConfig {
        hidden: vec![128, 256, 256, 128],
        time_embed_dim: 32,
        ..TabbyFlowConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = TabbyFlow::new(codec.layout(), Schedule::ot(), cfg, AdamConfig::default(), &mut rng).unwrap();
    (model, data)
}

fn bench(c: &mut Criterion) {
    let (model, data) = model();
    let mut group = c.benchmark_group("tabbyflow");
    group.sample_size(10);
    for mode in ["parallel", "sequential"] {
        let run_mode = |f: &mut dyn FnMut()| {
            if mode == "sequential" {
                par::sequential(f)
            } else {
                f()
            }
        };
        group.bench_function(BenchmarkId::new("train_step_4096", mode), |b| {
            let mut m = model.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            b.iter(|| run_mode(&mut || {
                m.train_step(data.view(), &mut rng).unwrap();
            }))
        });
        group.bench_function(BenchmarkId::new("sample_2048x10", mode), |b| {
            let run = SampleRun {
                steps: 10,
                ..SampleRun::default()
            };
            b.iter(|| run_mode(&mut || {
                sample(&model, 2048, &run).unwrap();
            }))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
