//! Seeded fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subseg_core::{FeatureMap, Grid};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(channels: usize, side: usize, seed: u64) -> FeatureMap {
    let mut r = rng(seed);
    let data = (0..channels * side * side * side).map(|_| r.gen_range(-1.0..1.0)).collect();
    FeatureMap::from_vec(channels, [side; 3], data).expect("sized")
}

/// Per-voxel softmax-like probabilities: random positive values normalised over channels.
pub fn random_probs(classes: usize, side: usize, seed: u64) -> FeatureMap {
    let mut r = rng(seed);
    let n = side * side * side;
    let mut data: Vec<f32> = (0..classes * n).map(|_| r.gen_range(0.01..1.0)).collect();
    for v in 0..n {
        let s: f32 = (0..classes).map(|c| data[c * n + v]).sum();
        for c in 0..classes {
            data[c * n + v] /= s;
        }
    }
    FeatureMap::from_vec(classes, [side; 3], data).expect("sized")
}

/// A ball of radius `r` centred at `c` inside a `side³` grid.
pub fn ball(side: usize, c: [f64; 3], r: f64) -> Grid<bool> {
    Grid::from_fn([side; 3], |p| (0..3).map(|a| (p[a] as f64 - c[a]).powi(2)).sum::<f64>() <= r * r)
}
