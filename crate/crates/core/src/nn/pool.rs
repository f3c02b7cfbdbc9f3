use crate::tensor::FeatureMap;

/// Index (0..8) of the winning voxel in each 2x2x2 window.
pub struct MaxPoolCache {
    argmax: Vec<u8>,
    input_dims: [usize; 3],
}

/// 2x2x2 max pooling with stride 2. Spatial dims must be even.
pub fn max_pool2(x: &FeatureMap) -> (FeatureMap, MaxPoolCache) {
    let [d, h, w] = x.dims();
    assert!(d % 2 == 0 && h % 2 == 0 && w % 2 == 0, "max_pool2 needs even dims, got {:?}", x.dims());
    let od = [d / 2, h / 2, w / 2];
    let mut out = FeatureMap::zeros(x.channels(), od);
    let on = out.spatial_len();
    let mut argmax = vec![0u8; x.channels() * on];
    for c in 0..x.channels() {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for i in 0..od[0] {
            for j in 0..od[1] {
                for k in 0..od[2] {
                    let o = (i * od[1] + j) * od[2] + k;
                    let mut best = f32::NEG_INFINITY;
                    let mut arg = 0u8;
                    for t in 0..8 {
                        let (a, b, e) = (t / 4, (t / 2) % 2, t % 2);
                        let v = src[((2 * i + a) * h + 2 * j + b) * w + 2 * k + e];
                        if v > best {
                            best = v;
                            arg = t as u8;
                        }
                    }
                    dst[o] = best;
                    argmax[c * on + o] = arg;
                }
            }
        }
    }
    (out, MaxPoolCache { argmax, input_dims: x.dims() })
}

pub fn max_pool2_backward(cache: &MaxPoolCache, dy: &FeatureMap) -> FeatureMap {
    let [_, h, w] = cache.input_dims;
    let od = dy.dims();
    let on = dy.spatial_len();
    let mut dx = FeatureMap::zeros(dy.channels(), cache.input_dims);
    for c in 0..dy.channels() {
        let g = dy.channel(c);
        let dst = dx.channel_mut(c);
        for i in 0..od[0] {
            for j in 0..od[1] {
                for k in 0..od[2] {
                    let o = (i * od[1] + j) * od[2] + k;
                    let t = cache.argmax[c * on + o] as usize;
                    let (a, b, e) = (t / 4, (t / 2) % 2, t % 2);
                    dst[((2 * i + a) * h + 2 * j + b) * w + 2 * k + e] += g[o];
                }
            }
        }
    }
    dx
}
