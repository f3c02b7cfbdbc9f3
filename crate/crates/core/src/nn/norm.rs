use super::{join, Module, Param};
use crate::tensor::{FeatureMap, Matrix};

const EPS: f64 = 1e-5;

/// Group normalization over `channels / groups`-channel groups with per-channel affine.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
}

pub struct GroupNormCache {
    xhat: FeatureMap,
    inv_std: Vec<f32>,
}

impl GroupNorm {
    pub fn new(groups: usize, channels: usize) -> Self {
        assert!(groups > 0 && channels.is_multiple_of(groups), "channels {channels} not divisible by groups {groups}");
        Self { groups, channels, gamma: Param::filled(&[channels], 1.0), beta: Param::zeros(&[channels]) }
    }

    fn normalize(&self, x: &FeatureMap) -> (FeatureMap, Vec<f32>) {
        assert_eq!(x.channels(), self.channels, "group norm channels");
        let n = x.spatial_len();
        let per = self.channels / self.groups;
        let mut xhat = FeatureMap::zeros(self.channels, x.dims());
        let mut inv = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let span = g * per * n..(g + 1) * per * n;
            let src = &x.as_slice()[span.clone()];
            let count = src.len() as f64;
            let mean = src.iter().map(|&v| v as f64).sum::<f64>() / count;
            let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / count;
            let istd = 1.0 / (var + EPS).sqrt();
            for (d, &s) in xhat.as_mut_slice()[span].iter_mut().zip(src) {
                *d = ((s as f64 - mean) * istd) as f32;
            }
            inv.push(istd as f32);
        }
        (xhat, inv)
    }

    fn affine(&self, xhat: &FeatureMap) -> FeatureMap {
        let mut y = xhat.clone();
        for c in 0..self.channels {
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            for v in y.channel_mut(c) {
                *v = *v * g + b;
            }
        }
        y
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        self.affine(&self.normalize(x).0)
    }

    pub fn forward_train(&self, x: &FeatureMap) -> (FeatureMap, GroupNormCache) {
        let (xhat, inv_std) = self.normalize(x);
        let y = self.affine(&xhat);
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &GroupNormCache, dy: &FeatureMap) -> FeatureMap {
        let n = dy.spatial_len();
        let per = self.channels / self.groups;
        let mut dx = FeatureMap::zeros(self.channels, dy.dims());
        for c in 0..self.channels {
            let (xh, g) = (cache.xhat.channel(c), dy.channel(c));
            self.gamma.grad[c] += xh.iter().zip(g).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() as f32;
            self.beta.grad[c] += g.iter().map(|&b| b as f64).sum::<f64>() as f32;
        }
        for grp in 0..self.groups {
            let count = (per * n) as f64;
            let mut sum_d = 0.0f64;
            let mut sum_dx = 0.0f64;
            for c in grp * per..(grp + 1) * per {
                let gamma = self.gamma.value[c] as f64;
                for (&xh, &g) in cache.xhat.channel(c).iter().zip(dy.channel(c)) {
                    let d = g as f64 * gamma;
                    sum_d += d;
                    sum_dx += d * xh as f64;
                }
            }
            let (mean_d, mean_dx) = (sum_d / count, sum_dx / count);
            let istd = cache.inv_std[grp] as f64;
            for c in grp * per..(grp + 1) * per {
                let gamma = self.gamma.value[c] as f64;
                let xh = cache.xhat.channel(c);
                let g = dy.channel(c);
                for (i, out) in dx.channel_mut(c).iter_mut().enumerate() {
                    let d = g[i] as f64 * gamma;
                    *out = (istd * (d - mean_d - xh[i] as f64 * mean_dx)) as f32;
                }
            }
        }
        dx
    }
}

impl Module for GroupNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Layer normalization over the columns of each row.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub dim: usize,
    pub gamma: Param,
    pub beta: Param,
}

pub struct LayerNormCache {
    xhat: Matrix,
    inv_std: Vec<f32>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self { dim, gamma: Param::filled(&[dim], 1.0), beta: Param::zeros(&[dim]) }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        self.forward_train(x).0
    }

    pub fn forward_train(&self, x: &Matrix) -> (Matrix, LayerNormCache) {
        assert_eq!(x.cols, self.dim, "layer norm width");
        let mut xhat = Matrix::zeros(x.rows, x.cols);
        let mut y = Matrix::zeros(x.rows, x.cols);
        let mut inv_std = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / self.dim as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / self.dim as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std.push(istd as f32);
            let xh = xhat.row_mut(r);
            for (d, &s) in xh.iter_mut().zip(row) {
                *d = ((s as f64 - mean) * istd) as f32;
            }
            let xh = xhat.row(r).to_vec();
            for (c, out) in y.row_mut(r).iter_mut().enumerate() {
                *out = xh[c] * self.gamma.value[c] + self.beta.value[c];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Matrix) -> Matrix {
        let mut dx = Matrix::zeros(dy.rows, dy.cols);
        let n = self.dim as f64;
        for r in 0..dy.rows {
            let (xh, g) = (cache.xhat.row(r), dy.row(r));
            let mut sum_d = 0.0f64;
            let mut sum_dx = 0.0f64;
            for c in 0..self.dim {
                self.gamma.grad[c] += g[c] * xh[c];
                self.beta.grad[c] += g[c];
                let d = g[c] as f64 * self.gamma.value[c] as f64;
                sum_d += d;
                sum_dx += d * xh[c] as f64;
            }
            let istd = cache.inv_std[r] as f64;
            for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
                let d = g[c] as f64 * self.gamma.value[c] as f64;
                *out = (istd * (d - sum_d / n - xh[c] as f64 * sum_dx / n)) as f32;
            }
        }
        dx
    }
}

impl Module for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::*;
    use rand::Rng;

    #[test]
    fn group_norm_normalizes_each_group() {
        let gn = GroupNorm::new(2, 4);
        let x = random_map(4, [3, 3, 3], 1);
        let y = gn.forward(&x);
        for g in 0..2 {
            let span = &y.as_slice()[g * 54..(g + 1) * 54];
            let mean: f64 = span.iter().map(|&v| v as f64).sum::<f64>() / 54.0;
            let var: f64 = span.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 54.0;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn group_norm_gradients_match_finite_differences() {
        let mut gn = GroupNorm::new(2, 4);
        let mut r = rng(2);
        for v in gn.gamma.value.iter_mut().chain(gn.beta.value.iter_mut()) {
            *v = r.gen_range(0.5..1.5);
        }
        let x = random_map(4, [2, 3, 2], 3);
        let w = random_map(4, [2, 3, 2], 4);
        let (_, cache) = gn.forward_train(&x);
        let dx = gn.backward(&cache, &w);
        let loss = |g: &GroupNorm, x: &FeatureMap| weighted_sum(g.forward(x).as_slice(), w.as_slice());
        let h = 1e-2f32;
        for i in [0usize, 5, 13, 22, 40, 47] {
            let mut p = x.clone();
            p.as_mut_slice()[i] += h;
            let mut m = x.clone();
            m.as_mut_slice()[i] -= h;
            let fd = (loss(&gn, &p) - loss(&gn, &m)) / (2.0 * h as f64);
            assert_close(dx.as_slice()[i] as f64, fd, 2e-2, "gn dx");
        }
        for c in 0..4 {
            let mut p = gn.clone();
            p.gamma.value[c] += h;
            let mut m = gn.clone();
            m.gamma.value[c] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h as f64);
            assert_close(gn.gamma.grad[c] as f64, fd, 1e-2, "gn dgamma");
        }
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut ln = LayerNorm::new(6);
        let mut r = rng(5);
        for v in ln.gamma.value.iter_mut() {
            *v = r.gen_range(0.5..1.5);
        }
        let x = Matrix::from_vec(3, 6, (0..18).map(|_| r.gen_range(-2.0..2.0)).collect());
        let w: Vec<f32> = (0..18).map(|_| r.gen_range(-1.0..1.0)).collect();
        let (_, cache) = ln.forward_train(&x);
        let dx = ln.backward(&cache, &Matrix::from_vec(3, 6, w.clone()));
        let h = 1e-2f32;
        for i in 0..18 {
            let mut p = x.clone();
            p.data[i] += h;
            let mut m = x.clone();
            m.data[i] -= h;
            let fd = (weighted_sum(&ln.forward(&p).data, &w) - weighted_sum(&ln.forward(&m).data, &w)) / (2.0 * h as f64);
            assert_close(dx.data[i] as f64, fd, 2e-2, "ln dx");
        }
    }
}
