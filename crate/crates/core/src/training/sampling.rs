use rand::Rng;

use crate::grid::Grid;
use crate::patch::PatchPlan;

/// Probability that a draw is restricted to patches containing foreground.
pub const FOREGROUND_PROB: f64 = 0.5;

/// Plan offsets whose label window holds at least one non-background voxel.
pub fn foreground_offsets(labels: &Grid<u8>, plan: &PatchPlan) -> Vec<[usize; 3]> {
    let [d, h, w] = labels.dims();
    // inclusive 3D prefix sums with a zero border
    let (h1, w1) = (h + 1, w + 1);
    let mut pre = vec![0u32; (d + 1) * h1 * w1];
    let at = |i: usize, j: usize, k: usize| (i * h1 + j) * w1 + k;
    for i in 0..d {
        for j in 0..h {
            for k in 0..w {
                let fg = u32::from(*labels.get([i, j, k]) != 0);
                pre[at(i + 1, j + 1, k + 1)] = fg + pre[at(i, j + 1, k + 1)] + pre[at(i + 1, j, k + 1)]
                    + pre[at(i + 1, j + 1, k)]
                    - pre[at(i, j, k + 1)]
                    - pre[at(i, j + 1, k)]
                    - pre[at(i + 1, j, k)]
                    + pre[at(i, j, k)];
            }
        }
    }
    let s = plan.grid.size;
    plan.offsets
        .iter()
        .copied()
        .filter(|&[a, b, c]| {
            let (x, y, z) = (a + s, b + s, c + s);
            let total = pre[at(x, y, z)] as i64 - pre[at(a, y, z)] as i64 - pre[at(x, b, z)] as i64
                - pre[at(x, y, c)] as i64
                + pre[at(a, b, z)] as i64
                + pre[at(a, y, c)] as i64
                + pre[at(x, b, c)] as i64
                - pre[at(a, b, c)] as i64;
            total > 0
        })
        .collect()
}

/// Draws a plan offset: with probability `fg_prob` uniformly among foreground-containing
/// patches (the distribution of redrawing until one is hit), otherwise uniformly.
pub fn draw_offset(plan: &PatchPlan, foreground: &[[usize; 3]], fg_prob: f64, rng: &mut impl Rng) -> [usize; 3] {
    let biased = rng.gen_bool(fg_prob);
    if biased && !foreground.is_empty() {
        foreground[rng.gen_range(0..foreground.len())]
    } else {
        plan.offsets[rng.gen_range(0..plan.offsets.len())]
    }
}

/// One aligned (intensity, label) training patch from crop-frame grids.
pub fn sample_training_patch(
    intensity: &Grid<f32>,
    labels: &Grid<u8>,
    plan: &PatchPlan,
    rng: &mut impl Rng,
) -> (Grid<f32>, Grid<u8>) {
    let fg = foreground_offsets(labels, plan);
    let o = draw_offset(plan, &fg, FOREGROUND_PROB, rng);
    let size = plan.grid.patch_dims();
    (intensity.window(o, size), labels.window(o, size))
}
