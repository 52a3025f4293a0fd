use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ghnerf_core::geometry::{Ray, Vec3};
use ghnerf_core::model::SamplingMode;
use ghnerf_core::rendering::{composite, sample_uniform, Jitter};
use ghnerf_core::field::FieldOutput;
use ghnerf_core::trainer::{render_frame_view, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn compositing(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ray = Ray::new(Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0), 0.5, 4.5).unwrap();
    let mut group = c.benchmark_group("composite");
    for n in [40usize, 128] {
        let samples = sample_uniform(&ray, n, &mut Jitter::Off).unwrap();
        let outputs: Vec<FieldOutput<f64>> = (0..n)
            .map(|_| FieldOutput {
                sigma: rng.gen_range(0.0..20.0),
                color: [rng.gen(), rng.gen(), rng.gen()],
                heatmap: (0..14).map(|_| rng.gen()).collect(),
                coord: None,
            })
            .collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| composite(black_box(&samples), black_box(&outputs)).unwrap())
        });
    }
    group.finish();
}

fn rendering(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let ds = ghnerf_bench::dataset(dir.path());
    let model = ghnerf_bench::model(&ds, dir.path());
    let frame = &ds.frames[0];
    let target = ds.cameras[ds.held_out_cameras()[0]];
    let mut group = c.benchmark_group("render_64x64");
    group.sample_size(10);
    for (name, mode) in [("guided_32+8", SamplingMode::Guided), ("uniform_128", SamplingMode::Uniform(128))] {
        group.bench_function(name, |b| {
            b.iter(|| render_frame_view(&model, &ds, frame, &target, None, 3, mode).unwrap())
        });
    }
    group.finish();
}

fn training(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let ds = ghnerf_bench::dataset(dir.path());
    let cfg = ghnerf_bench::train_config(dir.path());
    let mut trainer = Trainer::new(&cfg, &ds).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("step_512_rays", |b| b.iter(|| trainer.step().unwrap()));
    group.finish();
}

criterion_group!(benches, compositing, rendering, training);
criterion_main!(benches);
