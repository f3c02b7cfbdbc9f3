use rand::Rng;

use super::{gemm, join, LayerNorm, LayerNormCache, Linear, Module, Param, View, ViewMut};
use crate::tensor::Matrix;

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Multi-head self-attention with a fused query/key/value projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub dim: usize,
    pub heads: usize,
    pub qkv: Linear,
    pub proj: Linear,
}

pub struct AttentionCache {
    x: Matrix,
    qkv: Matrix,
    /// Row-softmaxed scores, one `tokens × tokens` block per head.
    probs: Vec<f32>,
    merged: Matrix,
}

impl MultiHeadAttention {
    pub fn new(dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "embedding {dim} not divisible by {heads} heads");
        Self { dim, heads, qkv: Linear::new(dim, 3 * dim, rng), proj: Linear::new(dim, dim, rng) }
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        self.forward_train(x).0
    }

    /// Attention weights per head, `heads × tokens × tokens`, rows summing to one.
    pub fn attention_weights(&self, x: &Matrix) -> Vec<f32> {
        self.forward_train(x).1.probs
    }

    pub fn forward_train(&self, x: &Matrix) -> (Matrix, AttentionCache) {
        let t = x.rows;
        let (e, d) = (self.dim, self.head_dim());
        let qkv = self.qkv.forward(x);
        let scale = 1.0 / (d as f32).sqrt();
        let mut probs = vec![0.0f32; self.heads * t * t];
        let mut merged = Matrix::zeros(t, e);
        for h in 0..self.heads {
            let p = &mut probs[h * t * t..(h + 1) * t * t];
            gemm(
                t,
                d,
                t,
                scale,
                View { data: &qkv.data, offset: h * d, rs: 3 * e, cs: 1 },
                View { data: &qkv.data, offset: e + h * d, rs: 1, cs: 3 * e },
                0.0,
                ViewMut { data: p, offset: 0, rs: t, cs: 1 },
            );
            for row in p.chunks_mut(t) {
                let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
            gemm(
                t,
                t,
                d,
                1.0,
                View { data: p, offset: 0, rs: t, cs: 1 },
                View { data: &qkv.data, offset: 2 * e + h * d, rs: 3 * e, cs: 1 },
                0.0,
                ViewMut { data: &mut merged.data, offset: h * d, rs: e, cs: 1 },
            );
        }
        let y = self.proj.forward(&merged);
        (y, AttentionCache { x: x.clone(), qkv, probs, merged })
    }

    pub fn backward(&mut self, cache: &AttentionCache, dy: &Matrix) -> Matrix {
        let t = dy.rows;
        let (e, d) = (self.dim, self.head_dim());
        let scale = 1.0 / (d as f32).sqrt();
        let dmerged = self.proj.backward(&cache.merged, dy);
        let mut dqkv = Matrix::zeros(t, 3 * e);
        let mut dp = vec![0.0f32; t * t];
        for h in 0..self.heads {
            let p = &cache.probs[h * t * t..(h + 1) * t * t];
            // dV = Pᵀ dO
            gemm(
                t,
                t,
                d,
                1.0,
                View { data: p, offset: 0, rs: 1, cs: t },
                View { data: &dmerged.data, offset: h * d, rs: e, cs: 1 },
                0.0,
                ViewMut { data: &mut dqkv.data, offset: 2 * e + h * d, rs: 3 * e, cs: 1 },
            );
            // dP = dO Vᵀ
            gemm(
                t,
                d,
                t,
                1.0,
                View { data: &dmerged.data, offset: h * d, rs: e, cs: 1 },
                View { data: &cache.qkv.data, offset: 2 * e + h * d, rs: 1, cs: 3 * e },
                0.0,
                ViewMut { data: &mut dp, offset: 0, rs: t, cs: 1 },
            );
            for (drow, prow) in dp.chunks_mut(t).zip(p.chunks(t)) {
                let dot: f32 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (g, &pv) in drow.iter_mut().zip(prow) {
                    *g = pv * (*g - dot);
                }
            }
            // dQ = dS K · scale, dK = dSᵀ Q · scale
            gemm(
                t,
                t,
                d,
                scale,
                View { data: &dp, offset: 0, rs: t, cs: 1 },
                View { data: &cache.qkv.data, offset: e + h * d, rs: 3 * e, cs: 1 },
                0.0,
                ViewMut { data: &mut dqkv.data, offset: h * d, rs: 3 * e, cs: 1 },
            );
            gemm(
                t,
                t,
                d,
                scale,
                View { data: &dp, offset: 0, rs: 1, cs: t },
                View { data: &cache.qkv.data, offset: h * d, rs: 3 * e, cs: 1 },
                0.0,
                ViewMut { data: &mut dqkv.data, offset: e + h * d, rs: 3 * e, cs: 1 },
            );
        }
        self.qkv.backward(&cache.x, &dqkv)
    }
}

impl Module for MultiHeadAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// Pre-norm encoder layer: `x + MHA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct TransformerLayerCache {
    n1: LayerNormCache,
    attn: AttentionCache,
    n2: LayerNormCache,
    n2_out: Matrix,
    pre_act: Matrix,
    act: Matrix,
}

impl TransformerLayer {
    pub fn new(dim: usize, heads: usize, mlp_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, heads, rng),
            norm2: LayerNorm::new(dim),
            fc1: Linear::new(dim, mlp_dim, rng),
            fc2: Linear::new(mlp_dim, dim, rng),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut h = self.attn.forward(&self.norm1.forward(x));
        h.add_assign(x);
        let mut a = self.fc1.forward(&self.norm2.forward(&h));
        for v in &mut a.data {
            *v = gelu(*v);
        }
        let mut y = self.fc2.forward(&a);
        y.add_assign(&h);
        y
    }

    pub fn forward_train(&self, x: &Matrix) -> (Matrix, TransformerLayerCache) {
        let (n1_out, n1) = self.norm1.forward_train(x);
        let (mut h, attn) = self.attn.forward_train(&n1_out);
        h.add_assign(x);
        let (n2_out, n2) = self.norm2.forward_train(&h);
        let pre_act = self.fc1.forward(&n2_out);
        let mut act = pre_act.clone();
        for v in &mut act.data {
            *v = gelu(*v);
        }
        let mut y = self.fc2.forward(&act);
        y.add_assign(&h);
        (y, TransformerLayerCache { n1, attn, n2, n2_out, pre_act, act })
    }

    pub fn backward(&mut self, cache: &TransformerLayerCache, dy: &Matrix) -> Matrix {
        let mut da = self.fc2.backward(&cache.act, dy);
        for (g, &x) in da.data.iter_mut().zip(&cache.pre_act.data) {
            *g *= gelu_grad(x);
        }
        let dn2 = self.fc1.backward(&cache.n2_out, &da);
        let mut dh = self.norm2.backward(&cache.n2, &dn2);
        dh.add_assign(dy);
        let dn1 = self.attn.backward(&cache.attn, &dh);
        let mut dx = self.norm1.backward(&cache.n1, &dn1);
        dx.add_assign(&dh);
        dx
    }
}

impl Module for TransformerLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::*;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut r = rng(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn gelu_matches_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-5);
        assert!((gelu(-1.0) + 0.158_808).abs() < 1e-5);
        let h = 1e-3;
        for x in [-2.0f32, -0.3, 0.5, 1.7] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-3);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mha = MultiHeadAttention::new(8, 2, &mut rng(1));
        let x = random_matrix(5, 8, 2);
        let w = mha.attention_weights(&x);
        assert_eq!(w.len(), 2 * 25);
        for row in w.chunks(5) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn attention_matches_naive_single_head() {
        let mha = MultiHeadAttention::new(4, 1, &mut rng(3));
        let x = random_matrix(3, 4, 4);
        let qkv = mha.qkv.forward(&x);
        let mut merged = Matrix::zeros(3, 4);
        for i in 0..3 {
            let s: Vec<f32> = (0..3)
                .map(|j| (0..4).map(|c| qkv.row(i)[c] * qkv.row(j)[4 + c]).sum::<f32>() / 2.0)
                .collect();
            let m = s.iter().cloned().fold(f32::MIN, f32::max);
            let z: f32 = s.iter().map(|v| (v - m).exp()).sum();
            for c in 0..4 {
                merged.row_mut(i)[c] = (0..3).map(|j| (s[j] - m).exp() / z * qkv.row(j)[8 + c]).sum();
            }
        }
        let expect = mha.proj.forward(&merged);
        let got = mha.forward(&x);
        for (a, b) in got.data.iter().zip(&expect.data) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn transformer_layer_gradients_match_finite_differences() {
        let mut layer = TransformerLayer::new(8, 2, 16, &mut rng(7));
        let x = random_matrix(4, 8, 8);
        let w = random_matrix(4, 8, 9);
        let (_, cache) = layer.forward_train(&x);
        let dx = layer.backward(&cache, &w);
        let h = 1e-2f32;
        for i in [0usize, 3, 11, 17, 25, 31] {
            let mut p = x.clone();
            p.data[i] += h;
            let mut m = x.clone();
            m.data[i] -= h;
            let fd = (weighted_sum(&layer.forward(&p).data, &w.data) - weighted_sum(&layer.forward(&m).data, &w.data))
                / (2.0 * h as f64);
            assert_close(dx.data[i] as f64, fd, 2e-2, "transformer dx");
        }
        for i in [0usize, 40, 100, 190] {
            let mut p = layer.clone();
            p.attn.qkv.weight.value[i] += h;
            let mut m = layer.clone();
            m.attn.qkv.weight.value[i] -= h;
            let fd = (weighted_sum(&p.forward(&x).data, &w.data) - weighted_sum(&m.forward(&x).data, &w.data))
                / (2.0 * h as f64);
            assert_close(layer.attn.qkv.weight.grad[i] as f64, fd, 2e-2, "transformer dqkv");
        }
    }
}
