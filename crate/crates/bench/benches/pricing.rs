use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use heston_coevo::pricing::{price_surface, CalibrationTarget};
use heston_coevo::{HestonParams, MarketContext, Pricer, SurfaceGrid};

fn params() -> HestonParams {
    HestonParams::new(1.5, 0.08, 0.5, -0.6, 0.06)
}

fn surface(c: &mut Criterion) {
    let ctx = MarketContext::flat(100.0, 0.03);
    let pr = Pricer::default();
    let mut g = c.benchmark_group("surface");
    for (k, t) in [(8, 5), (6, 4), (16, 10)] {
        let grid = SurfaceGrid::synthetic(100.0, k, t).unwrap();
        g.bench_function(format!("{k}x{t}"), |b| {
            b.iter(|| price_surface(black_box(&params()), &ctx, &grid, &pr).unwrap())
        });
    }
    g.finish();

    let strict = Pricer::default().strict(true);
    let grid = SurfaceGrid::synthetic(100.0, 8, 5).unwrap();
    c.bench_function("surface/8x5 strict", |b| {
        b.iter(|| price_surface(black_box(&params()), &ctx, &grid, &strict).unwrap())
    });
}

fn loss(c: &mut Criterion) {
    let ctx = MarketContext::flat(100.0, 0.03);
    let pr = Pricer::default();
    let grid = SurfaceGrid::synthetic(100.0, 8, 5).unwrap();
    let target = CalibrationTarget::from_surface(&price_surface(&params(), &ctx, &grid, &pr).unwrap(), &ctx);
    let trial = HestonParams::new(2.0, 0.05, 0.4, -0.5, 0.04);
    c.bench_function("loss/8x5", |b| b.iter(|| target.loss(black_box(&trial), &pr)));
}

criterion_group!(benches, surface, loss);
criterion_main!(benches);
