use criterion::{black_box, criterion_group, criterion_main, Criterion};
use subseg_bench::{ball, random_map, random_probs, rng};
use subseg_core::metrics::assd;
use subseg_core::nn::Conv3d;
use subseg_core::patch::{plan_patches, ProbAccumulator};
use subseg_core::PatchGrid;

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv3d_forward");
    g.sample_size(10);
    for (cin, cout, side) in [(1, 4, 96), (4, 4, 96), (16, 16, 48)] {
        let layer = Conv3d::new(cin, cout, 3, &mut rng(1));
        let x = random_map(cin, side, 2);
        g.bench_function(format!("{cin}to{cout}_{side}"), |b| b.iter(|| layer.forward(black_box(&x))));
    }
    g.finish();
}

fn voting(c: &mut Criterion) {
    let mut g = c.benchmark_group("accumulate_vote");
    g.sample_size(10);
    // 8 patches of 32³ at stride 16 over a 48³ crop, 32 classes
    let grid = PatchGrid::new(32, 16).unwrap();
    let plan = plan_patches([48; 3], grid).unwrap();
    let probs = random_probs(32, 32, 3);
    g.bench_function("accumulate_8x32cube_32cls", |b| {
        b.iter(|| {
            let mut acc = ProbAccumulator::new(plan.clone(), 32);
            for &o in &plan.offsets {
                acc.accumulate(o, &probs).unwrap();
            }
            acc
        })
    });
    let mut acc = ProbAccumulator::new(plan.clone(), 32);
    for &o in &plan.offsets {
        acc.accumulate(o, &probs).unwrap();
    }
    g.bench_function("vote_48cube_32cls", |b| b.iter(|| acc.vote().unwrap()));
    g.finish();
}

fn surface_distance(c: &mut Criterion) {
    let a = ball(64, [30.0, 32.0, 31.0], 14.0);
    let b = ball(64, [33.0, 30.0, 32.0], 13.0);
    c.bench_function("assd_two_balls_64cube", |bch| bch.iter(|| assd(black_box(&a), black_box(&b), [1.0; 3]).unwrap()));
}

criterion_group!(benches, conv, voting, surface_distance);
criterion_main!(benches);
