//! Minimal CPU layers with explicit backward passes.
//!
//! Every layer exposes an inference `forward`, a `forward_train` that also returns
//! what its backward pass needs, and a `backward` that accumulates parameter
//! gradients and returns the input gradient.

mod attention;
mod conv;
mod linear;
mod norm;
mod pool;

pub use attention::{gelu, AttentionCache, MultiHeadAttention, TransformerLayer, TransformerLayerCache};
pub use conv::{Conv3d, ConvTranspose3d};
pub use linear::Linear;
pub use norm::{GroupNorm, GroupNormCache, LayerNorm, LayerNormCache};
pub use pool::{max_pool2, max_pool2_backward, MaxPoolCache};

use rand::Rng;

use crate::tensor::FeatureMap;

/// A trainable tensor and its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), value: vec![0.0; n], grad: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], v: f32) -> Self {
        let mut p = Self::zeros(shape);
        p.value.fill(v);
        p
    }

    pub fn uniform(shape: &[usize], bound: f32, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(shape);
        for v in &mut p.value {
            *v = rng.gen_range(-bound..=bound);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Named traversal over parameters, in a fixed order.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Strided read-only matrix view into a slice.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f32],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

/// Strided mutable matrix view into a slice.
pub(crate) struct ViewMut<'a> {
    pub data: &'a mut [f32],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

fn last_index(offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    offset + (rows.max(1) - 1) * rs + (cols.max(1) - 1) * cs
}

/// `C = alpha * A(m×k) * B(k×n) + beta * C`. With `beta == 0`, C is not read.
pub(crate) fn gemm(m: usize, k: usize, n: usize, alpha: f32, a: View, b: View, beta: f32, c: ViewMut) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(last_index(a.offset, m, k, a.rs, a.cs) < a.data.len().max(1) || k == 0, "gemm: A out of bounds");
    assert!(last_index(b.offset, k, n, b.rs, b.cs) < b.data.len().max(1) || k == 0, "gemm: B out of bounds");
    assert!(last_index(c.offset, m, n, c.rs, c.cs) < c.data.len(), "gemm: C out of bounds");
    // SAFETY: all three views were bounds-checked above; A and B are shared borrows and
    // C is a unique borrow, so the output cannot alias either input.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

pub fn relu(x: &FeatureMap) -> FeatureMap {
    let mut y = x.clone();
    relu_inplace(y.as_mut_slice());
    y
}

pub fn relu_inplace(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward_inplace(output: &[f32], grad: &mut [f32]) {
    for (g, &y) in grad.iter_mut().zip(output) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

/// `e^x` for `x <= 0` via range reduction and a degree-6 polynomial; relative error
/// below 1e-6, and written so the compiler can vectorise it.
#[inline(always)]
pub(crate) fn exp_nonpositive(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
    let x = x.max(-87.0);
    let n = (x * LOG2E + ROUND) - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5e-1;
    let e = p * r * r + r + 1.0;
    e * f32::from_bits(((n as i32 + 127) << 23) as u32)
}

/// Per-voxel softmax over channels.
pub fn softmax_channels(logits: &FeatureMap) -> FeatureMap {
    let n = logits.spatial_len();
    let c = logits.channels();
    let src = logits.as_slice();
    let mut out = FeatureMap::zeros(c, logits.dims());
    let dst = out.as_mut_slice();
    let mut max = src[..n].to_vec();
    for ch in 1..c {
        for (m, &x) in max.iter_mut().zip(&src[ch * n..(ch + 1) * n]) {
            if x > *m {
                *m = x;
            }
        }
    }
    let mut total = vec![0.0f32; n];
    for ch in 0..c {
        let row = &mut dst[ch * n..(ch + 1) * n];
        for ((d, &s), &m) in row.iter_mut().zip(&src[ch * n..(ch + 1) * n]).zip(&max) {
            *d = exp_nonpositive(s - m);
        }
        for (t, &d) in total.iter_mut().zip(row.iter()) {
            *t += d;
        }
    }
    for t in total.iter_mut() {
        *t = 1.0 / *t;
    }
    for ch in 0..c {
        for (d, t) in dst[ch * n..(ch + 1) * n].iter_mut().zip(&total) {
            *d *= t;
        }
    }
    out
}

/// Gradient w.r.t. logits given softmax output `p` and gradient `dp` w.r.t. probabilities.
pub fn softmax_channels_backward(p: &FeatureMap, dp: &FeatureMap) -> FeatureMap {
    let n = p.spatial_len();
    let c = p.channels();
    let (ps, gs) = (p.as_slice(), dp.as_slice());
    let mut dot = vec![0.0f32; n];
    for ch in 0..c {
        for v in 0..n {
            dot[v] += ps[ch * n + v] * gs[ch * n + v];
        }
    }
    let mut out = FeatureMap::zeros(c, p.dims());
    let o = out.as_mut_slice();
    for ch in 0..c {
        for v in 0..n {
            let i = ch * n + v;
            o[i] = ps[i] * (gs[i] - dot[v]);
        }
    }
    out
}
