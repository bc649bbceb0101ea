use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use splatmap::data::Rig;
use splatmap::imaging::Image;
use splatmap::losses::{chamfer, chamfer_with_grad};
use splatmap::net::{Model, ModelConfig};
use splatmap::splat::{self, RenderSettings};
use splatmap_bench::{gaussian_cloud, sphere_points};

fn rasterizer(c: &mut Criterion) {
    let cam = Rig::default().camera(30.0, 10.0).unwrap();
    let mut group = c.benchmark_group("splat");
    for n in [1024, 16384] {
        let set = gaussian_cloud(n, 1);
        for (label, settings) in [("exact", RenderSettings::default()), ("training", RenderSettings::training())] {
            group.bench_with_input(BenchmarkId::new(format!("forward/{label}"), n), &set, |b, set| {
                b.iter(|| splat::forward(set, &cam, &settings).0)
            });
        }
        let settings = RenderSettings::training();
        let d_rgb = Image::filled(64, 64, 3, 0.01);
        let d_alpha = Image::filled(64, 64, 1, 0.01);
        group.bench_with_input(BenchmarkId::new("backward/training", n), &set, |b, set| {
            let (_, state) = splat::forward(set, &cam, &settings);
            b.iter(|| splat::backward(&state, &d_rgb, &d_alpha))
        });
    }
    group.finish();
}

fn chamfer_loss(c: &mut Criterion) {
    let mut group = c.benchmark_group("chamfer");
    for n in [1024, 8192] {
        let s = sphere_points(n, 2);
        let t = sphere_points(n, 3);
        group.bench_function(BenchmarkId::new("value", n), |b| b.iter(|| chamfer(&s, &t).unwrap()));
        group.bench_function(BenchmarkId::new("with_grad", n), |b| b.iter(|| chamfer_with_grad(&s, &t).unwrap()));
    }
    group.finish();
}

fn network(c: &mut Criterion) {
    let model = Model::new(ModelConfig::default(), 0).unwrap();
    let images: Vec<Image> = (0..4).map(|k| Image::filled(64, 64, 3, 0.2 + 0.1 * k as f64)).collect();
    let mut group = c.benchmark_group("net");
    group.sample_size(10);
    group.bench_function("infer/4x64", |b| b.iter(|| model.infer(&images).unwrap()));
    group.finish();
}

criterion_group!(benches, rasterizer, chamfer_loss, network);
criterion_main!(benches);
