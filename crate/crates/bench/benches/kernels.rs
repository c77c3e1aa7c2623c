use std::hint::black_box;

use bilagrid::cp::{cp_als, AlsOptions, DenseTensor};
use bilagrid::grid4d::{Grid4Dims, IdentityInit};
use bilagrid::{AffineTransform, BilateralGrid3D, GuidanceFn, LowRank4DGrid, RenderOptions};
use bilagrid_bench::scene_fixture;
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn slice3d(c: &mut Criterion) {
    let grid = BilateralGrid3D::filled(8, 8, 4, AffineTransform::diagonal([1.1, 0.9, 1.0], [0.02, 0.0, -0.01])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let queries: Vec<(f64, f64, [f64; 3])> = (0..1024).map(|_| (rng.gen(), rng.gen(), [rng.gen(), rng.gen(), rng.gen()])).collect();
    c.bench_function("slice3d_1024", |b| {
        b.iter(|| {
            for &(u, v, col) in &queries {
                black_box(grid.process_pixel(u, v, col, &GuidanceFn::Luminance));
            }
        })
    });
}

fn slice4d(c: &mut Criterion) {
    let grid = LowRank4DGrid::identity(Grid4Dims::new(16, 16, 16, 8), 5).unwrap();
    let bounds = bilagrid::SceneBounds::unit_cube();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let queries: Vec<([f64; 3], [f64; 3])> = (0..1024)
        .map(|_| {
            let p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            (p, [rng.gen(), rng.gen(), rng.gen()])
        })
        .collect();
    c.bench_function("slice4d_1024", |b| {
        b.iter(|| {
            for &(p, col) in &queries {
                black_box(grid.apply_to_point(p, col, &bounds, &GuidanceFn::Luminance));
            }
        })
    });
}

fn render(c: &mut Criterion) {
    let (scene, cam) = scene_fixture(32, 32);
    let opts = RenderOptions::default();
    c.bench_function("render_view_32x32", |b| b.iter(|| black_box(scene.render_view(&cam, &opts))));
}

fn als(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = vec![8, 8, 8, 4];
    let n: usize = shape.iter().product();
    let tensor = DenseTensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let opts = AlsOptions {
        max_iters: 20,
        restarts: 1,
        ..AlsOptions::default()
    };
    c.bench_function("cp_als_8x8x8x4_r5", |b| b.iter(|| black_box(cp_als(&tensor, 5, &opts).unwrap())));
    let dims = Grid4Dims::new(8, 8, 8, 4);
    c.bench_function("identity_init_8x8x8x4_r5", |b| {
        b.iter(|| black_box(LowRank4DGrid::identity_init(dims, 5, &IdentityInit::default()).unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = slice3d, slice4d, render, als
}
criterion_main!(benches);
