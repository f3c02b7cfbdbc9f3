use rand::Rng;

use super::{gemm, join, Module, Param, View, ViewMut};
use crate::tensor::FeatureMap;

/// Output columns per im2col chunk; keeps the column buffer around 1 MiB.
fn chunk_columns(cin: usize) -> usize {
    ((1 << 18) / (27 * cin).max(1)).clamp(256, 8192)
}

/// Copies `x` into a buffer with a one-voxel zero border.
fn pad1(x: &FeatureMap) -> FeatureMap {
    let [d, h, w] = x.dims();
    let pd = [d + 2, h + 2, w + 2];
    let mut out = FeatureMap::zeros(x.channels(), pd);
    let pn = out.spatial_len();
    for c in 0..x.channels() {
        let src = x.channel(c);
        let dst = &mut out.as_mut_slice()[c * pn..(c + 1) * pn];
        for i in 0..d {
            for j in 0..h {
                let s = (i * h + j) * w;
                let t = ((i + 1) * pd[1] + j + 1) * pd[2] + 1;
                dst[t..t + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
    out
}

/// Inverse of [`pad1`]: drops the border.
fn unpad1(xp: &FeatureMap) -> FeatureMap {
    let [pd0, pd1, pd2] = xp.dims();
    let (d, h, w) = (pd0 - 2, pd1 - 2, pd2 - 2);
    let mut out = FeatureMap::zeros(xp.channels(), [d, h, w]);
    for c in 0..xp.channels() {
        let src = xp.channel(c);
        let dst = out.channel_mut(c);
        for i in 0..d {
            for j in 0..h {
                let s = ((i + 1) * pd1 + j + 1) * pd2 + 1;
                let t = (i * h + j) * w;
                dst[t..t + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
    out
}

/// Stride-1 3D convolution with cubic kernel 1 or 3 and "same" zero padding.
///
/// Weights are `[cout, cin, k, k, k]`. The 3³ case works on a zero-bordered copy of the
/// input and builds im2col columns one cache-sized chunk at a time.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Conv3d {
    pub fn new(cin: usize, cout: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel == 1 || kernel == 3, "kernel must be 1 or 3");
        let fan_in = (cin * kernel.pow(3)) as f32;
        let bound = 1.0 / fan_in.sqrt();
        Self {
            cin,
            cout,
            kernel,
            weight: Param::uniform(&[cout, cin, kernel, kernel, kernel], bound, rng),
            bias: Param::uniform(&[cout], bound, rng),
        }
    }

    pub fn zeroed(cin: usize, cout: usize, kernel: usize) -> Self {
        Self {
            cin,
            cout,
            kernel,
            weight: Param::zeros(&[cout, cin, kernel, kernel, kernel]),
            bias: Param::zeros(&[cout]),
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        assert_eq!(x.channels(), self.cin, "conv input channels");
        let mut out = if self.kernel == 1 { self.forward_pointwise(x) } else { self.forward_3(x) };
        for c in 0..self.cout {
            let b = self.bias.value[c];
            for v in out.channel_mut(c) {
                *v += b;
            }
        }
        out
    }

    fn forward_pointwise(&self, x: &FeatureMap) -> FeatureMap {
        let n = x.spatial_len();
        let mut out = FeatureMap::zeros(self.cout, x.dims());
        gemm(
            self.cout,
            self.cin,
            n,
            1.0,
            View { data: &self.weight.value, offset: 0, rs: self.cin, cs: 1 },
            View { data: x.as_slice(), offset: 0, rs: n, cs: 1 },
            0.0,
            ViewMut { data: out.as_mut_slice(), offset: 0, rs: n, cs: 1 },
        );
        out
    }

    fn forward_3(&self, x: &FeatureMap) -> FeatureMap {
        let xp = pad1(x);
        let pd = xp.dims();
        let vp = xp.spatial_len();
        let plane = pd[1] * pd[2];
        let first = plane + pd[2] + 1;
        let last = vp - first - 1;
        let k = self.cin * 27;
        let mut outp = FeatureMap::zeros(self.cout, pd);
        let nc = chunk_columns(self.cin);
        let mut col = vec![0.0f32; k * nc];
        let mut start = first;
        while start <= last {
            let n = nc.min(last + 1 - start);
            gather_columns(&xp, self.cin, start, n, plane, pd[2], &mut col);
            gemm(
                self.cout,
                k,
                n,
                1.0,
                View { data: &self.weight.value, offset: 0, rs: k, cs: 1 },
                View { data: &col, offset: 0, rs: n, cs: 1 },
                0.0,
                ViewMut { data: outp.as_mut_slice(), offset: start, rs: vp, cs: 1 },
            );
            start += n;
        }
        unpad1(&outp)
    }

    /// Accumulates weight/bias gradients; returns the input gradient when `need_input_grad`.
    pub fn backward(&mut self, x: &FeatureMap, dy: &FeatureMap, need_input_grad: bool) -> Option<FeatureMap> {
        for c in 0..self.cout {
            self.bias.grad[c] += dy.channel(c).iter().sum::<f32>();
        }
        if self.kernel == 1 {
            self.backward_pointwise(x, dy, need_input_grad)
        } else {
            self.backward_3(x, dy, need_input_grad)
        }
    }

    fn backward_pointwise(&mut self, x: &FeatureMap, dy: &FeatureMap, need_input_grad: bool) -> Option<FeatureMap> {
        let n = x.spatial_len();
        gemm(
            self.cout,
            n,
            self.cin,
            1.0,
            View { data: dy.as_slice(), offset: 0, rs: n, cs: 1 },
            View { data: x.as_slice(), offset: 0, rs: 1, cs: n },
            1.0,
            ViewMut { data: &mut self.weight.grad, offset: 0, rs: self.cin, cs: 1 },
        );
        need_input_grad.then(|| {
            let mut dx = FeatureMap::zeros(self.cin, x.dims());
            gemm(
                self.cin,
                self.cout,
                n,
                1.0,
                View { data: &self.weight.value, offset: 0, rs: 1, cs: self.cin },
                View { data: dy.as_slice(), offset: 0, rs: n, cs: 1 },
                0.0,
                ViewMut { data: dx.as_mut_slice(), offset: 0, rs: n, cs: 1 },
            );
            dx
        })
    }

    fn backward_3(&mut self, x: &FeatureMap, dy: &FeatureMap, need_input_grad: bool) -> Option<FeatureMap> {
        let xp = pad1(x);
        let dyp = pad1(dy);
        let pd = xp.dims();
        let vp = xp.spatial_len();
        let plane = pd[1] * pd[2];
        let first = plane + pd[2] + 1;
        let last = vp - first - 1;
        let k = self.cin * 27;
        let mut dxp = need_input_grad.then(|| FeatureMap::zeros(self.cin, pd));
        let nc = chunk_columns(self.cin);
        let mut col = vec![0.0f32; k * nc];
        let mut start = first;
        while start <= last {
            let n = nc.min(last + 1 - start);
            gather_columns(&xp, self.cin, start, n, plane, pd[2], &mut col);
            gemm(
                self.cout,
                n,
                k,
                1.0,
                View { data: dyp.as_slice(), offset: start, rs: vp, cs: 1 },
                View { data: &col, offset: 0, rs: 1, cs: n },
                1.0,
                ViewMut { data: &mut self.weight.grad, offset: 0, rs: k, cs: 1 },
            );
            if let Some(dxp) = dxp.as_mut() {
                gemm(
                    k,
                    self.cout,
                    n,
                    1.0,
                    View { data: &self.weight.value, offset: 0, rs: 1, cs: k },
                    View { data: dyp.as_slice(), offset: start, rs: vp, cs: 1 },
                    0.0,
                    ViewMut { data: &mut col, offset: 0, rs: n, cs: 1 },
                );
                scatter_columns(&col, self.cin, start, n, plane, pd[2], dxp);
            }
            start += n;
        }
        dxp.map(|d| unpad1(&d))
    }
}

/// Fills `col` (`27·cin × n`, row `ci·27 + tap`) with the shifted input windows for
/// padded positions `start..start + n`.
fn gather_columns(xp: &FeatureMap, cin: usize, start: usize, n: usize, plane: usize, row: usize, col: &mut [f32]) {
    let vp = xp.spatial_len();
    let src = xp.as_slice();
    for ci in 0..cin {
        for tap in 0..27 {
            let s = (ci * vp) as isize + start as isize + tap_shift(tap, plane, row);
            let r = (ci * 27 + tap) * n;
            col[r..r + n].copy_from_slice(&src[s as usize..s as usize + n]);
        }
    }
}

/// Adjoint of [`gather_columns`]: adds each column row back at its shifted position.
fn scatter_columns(col: &[f32], cin: usize, start: usize, n: usize, plane: usize, row: usize, dxp: &mut FeatureMap) {
    let vp = dxp.spatial_len();
    let dst = dxp.as_mut_slice();
    for ci in 0..cin {
        for tap in 0..27 {
            let s = ((ci * vp) as isize + start as isize + tap_shift(tap, plane, row)) as usize;
            let r = (ci * 27 + tap) * n;
            for (d, &v) in dst[s..s + n].iter_mut().zip(&col[r..r + n]) {
                *d += v;
            }
        }
    }
}

#[inline]
fn tap_shift(tap: usize, plane: usize, row: usize) -> isize {
    let (dz, dy, dx) = ((tap / 9) as isize - 1, ((tap / 3) % 3) as isize - 1, (tap % 3) as isize - 1);
    dz * plane as isize + dy * row as isize + dx
}

impl Module for Conv3d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Kernel-2, stride-2 transposed convolution (exact 2x upsampling, no overlap).
/// Weights are `[cin, cout, 2, 2, 2]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose3d {
    pub cin: usize,
    pub cout: usize,
    pub weight: Param,
    pub bias: Param,
}

impl ConvTranspose3d {
    pub fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((cout * 8) as f32).sqrt();
        Self {
            cin,
            cout,
            weight: Param::uniform(&[cin, cout, 2, 2, 2], bound, rng),
            bias: Param::uniform(&[cout], bound, rng),
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        assert_eq!(x.channels(), self.cin, "transposed conv input channels");
        let [d, h, w] = x.dims();
        let n = x.spatial_len();
        let od = [2 * d, 2 * h, 2 * w];
        let mut out = FeatureMap::zeros(self.cout, od);
        let mut tmp = vec![0.0f32; self.cout * n];
        for o in 0..8 {
            gemm(
                self.cout,
                self.cin,
                n,
                1.0,
                View { data: &self.weight.value, offset: o, rs: 8, cs: self.cout * 8 },
                View { data: x.as_slice(), offset: 0, rs: n, cs: 1 },
                0.0,
                ViewMut { data: &mut tmp, offset: 0, rs: n, cs: 1 },
            );
            let (a, b, c) = (o / 4, (o / 2) % 2, o % 2);
            for co in 0..self.cout {
                let bias = self.bias.value[co];
                let src = &tmp[co * n..(co + 1) * n];
                let dst = out.channel_mut(co);
                for i in 0..d {
                    for j in 0..h {
                        let row = ((2 * i + a) * od[1] + 2 * j + b) * od[2] + c;
                        let s = (i * h + j) * w;
                        for k in 0..w {
                            dst[row + 2 * k] = src[s + k] + bias;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&mut self, x: &FeatureMap, dy: &FeatureMap) -> FeatureMap {
        let [d, h, w] = x.dims();
        let n = x.spatial_len();
        let od = dy.dims();
        for co in 0..self.cout {
            self.bias.grad[co] += dy.channel(co).iter().sum::<f32>();
        }
        let mut dx = FeatureMap::zeros(self.cin, x.dims());
        let mut gathered = vec![0.0f32; self.cout * n];
        for o in 0..8 {
            let (a, b, c) = (o / 4, (o / 2) % 2, o % 2);
            for co in 0..self.cout {
                let src = dy.channel(co);
                let dst = &mut gathered[co * n..(co + 1) * n];
                for i in 0..d {
                    for j in 0..h {
                        let row = ((2 * i + a) * od[1] + 2 * j + b) * od[2] + c;
                        let s = (i * h + j) * w;
                        for k in 0..w {
                            dst[s + k] = src[row + 2 * k];
                        }
                    }
                }
            }
            gemm(
                self.cin,
                n,
                self.cout,
                1.0,
                View { data: x.as_slice(), offset: 0, rs: n, cs: 1 },
                View { data: &gathered, offset: 0, rs: 1, cs: n },
                1.0,
                ViewMut { data: &mut self.weight.grad, offset: o, rs: self.cout * 8, cs: 8 },
            );
            gemm(
                self.cin,
                self.cout,
                n,
                1.0,
                View { data: &self.weight.value, offset: o, rs: self.cout * 8, cs: 8 },
                View { data: &gathered, offset: 0, rs: n, cs: 1 },
                1.0,
                ViewMut { data: dx.as_mut_slice(), offset: 0, rs: n, cs: 1 },
            );
        }
        dx
    }
}

impl Module for ConvTranspose3d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::*;

    /// Direct-loop reference convolution.
    fn naive_conv(conv: &Conv3d, x: &FeatureMap) -> FeatureMap {
        let [d, h, w] = x.dims();
        let k = conv.kernel as isize;
        let r = k / 2;
        let mut out = FeatureMap::zeros(conv.cout, x.dims());
        for co in 0..conv.cout {
            for i in 0..d as isize {
                for j in 0..h as isize {
                    for l in 0..w as isize {
                        let mut acc = conv.bias.value[co] as f64;
                        for ci in 0..conv.cin {
                            for a in 0..k {
                                for b in 0..k {
                                    for c in 0..k {
                                        let (y, z, q) = (i + a - r, j + b - r, l + c - r);
                                        if y < 0 || z < 0 || q < 0 || y >= d as isize || z >= h as isize || q >= w as isize {
                                            continue;
                                        }
                                        let widx = (((co * conv.cin + ci) as isize * k + a) * k + b) * k + c;
                                        let xv = x.channel(ci)[((y as usize * h) + z as usize) * w + q as usize];
                                        acc += conv.weight.value[widx as usize] as f64 * xv as f64;
                                    }
                                }
                            }
                        }
                        out.channel_mut(co)[((i as usize * h) + j as usize) * w + l as usize] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (kernel, dims) in [(3, [5, 4, 6]), (1, [3, 3, 3]), (3, [1, 1, 1]), (3, [2, 7, 3])] {
            let conv = Conv3d::new(3, 4, kernel, &mut rng(11));
            let x = random_map(3, dims, 12);
            let fast = conv.forward(&x);
            let slow = naive_conv(&conv, &x);
            for (a, b) in fast.as_slice().iter().zip(slow.as_slice()) {
                assert!((a - b).abs() < 1e-5, "kernel {kernel} dims {dims:?}: {a} vs {b}");
            }
        }
    }

    fn check_conv_grads(kernel: usize) {
        let mut conv = Conv3d::new(2, 3, kernel, &mut rng(21));
        let x = random_map(2, [4, 3, 5], 22);
        let wts = random_map(3, [4, 3, 5], 23);
        let dx = conv.backward(&x, &wts, true).unwrap();
        let h = 1e-2f32;
        let loss = |c: &Conv3d, x: &FeatureMap| weighted_sum(c.forward(x).as_slice(), wts.as_slice());
        for i in [0usize, 7, 19, 33, 59, 100, 119] {
            let mut p = x.clone();
            p.as_mut_slice()[i] += h;
            let mut m = x.clone();
            m.as_mut_slice()[i] -= h;
            let fd = (loss(&conv, &p) - loss(&conv, &m)) / (2.0 * h as f64);
            assert_close(dx.as_slice()[i] as f64, fd, 1e-2, "conv dx");
        }
        for i in (0..conv.weight.len()).step_by(5) {
            let mut p = conv.clone();
            p.weight.value[i] += h;
            let mut m = conv.clone();
            m.weight.value[i] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h as f64);
            assert_close(conv.weight.grad[i] as f64, fd, 1e-2, "conv dw");
        }
        for i in 0..3 {
            let mut p = conv.clone();
            p.bias.value[i] += h;
            let mut m = conv.clone();
            m.bias.value[i] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h as f64);
            assert_close(conv.bias.grad[i] as f64, fd, 1e-2, "conv db");
        }
    }

    #[test]
    fn conv3_gradients_match_finite_differences() {
        check_conv_grads(3);
    }

    #[test]
    fn conv1_gradients_match_finite_differences() {
        check_conv_grads(1);
    }

    #[test]
    fn transposed_conv_upsamples_and_backprops() {
        let mut up = ConvTranspose3d::new(3, 2, &mut rng(31));
        let x = random_map(3, [2, 3, 2], 32);
        let y = up.forward(&x);
        assert_eq!(y.dims(), [4, 6, 4]);
        // y[co, 2i+a, 2j+b, 2k+c] = bias + Σ_ci W[ci, co, a, b, c] x[ci, i, j, k]
        let (i, j, k, a, b, c, co) = (1, 2, 0, 1, 0, 1, 1);
        let mut expect = up.bias.value[co] as f64;
        for ci in 0..3 {
            let widx = ((ci * 2 + co) * 2 + a) * 4 + b * 2 + c;
            expect += up.weight.value[widx] as f64 * x.channel(ci)[(i * 3 + j) * 2 + k] as f64;
        }
        let got = y.channel(co)[((2 * i + a) * 6 + 2 * j + b) * 4 + 2 * k + c];
        assert!((got as f64 - expect).abs() < 1e-5);

        let wts = random_map(2, [4, 6, 4], 33);
        let dx = up.backward(&x, &wts);
        let h = 1e-2f32;
        let loss = |u: &ConvTranspose3d, x: &FeatureMap| weighted_sum(u.forward(x).as_slice(), wts.as_slice());
        for idx in [0usize, 5, 17, 35] {
            let mut p = x.clone();
            p.as_mut_slice()[idx] += h;
            let mut m = x.clone();
            m.as_mut_slice()[idx] -= h;
            let fd = (loss(&up, &p) - loss(&up, &m)) / (2.0 * h as f64);
            assert_close(dx.as_slice()[idx] as f64, fd, 1e-2, "convT dx");
        }
        for idx in (0..up.weight.len()).step_by(3) {
            let mut p = up.clone();
            p.weight.value[idx] += h;
            let mut m = up.clone();
            m.weight.value[idx] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h as f64);
            assert_close(up.weight.grad[idx] as f64, fd, 1e-2, "convT dw");
        }
    }
}
