use serde::{Deserialize, Serialize};

use crate::nn::Module;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-6, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Adam with decoupled weight decay. Moment buffers follow the module's visit order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, model: &dyn Module) -> Self {
        let mut m = Vec::new();
        model.visit("", &mut |_, p| m.push(vec![0.0; p.len()]));
        let v = m.clone();
        Self { config, t: 0, m, v }
    }

    pub fn step(&mut self, model: &mut dyn Module) {
        self.t += 1;
        let c = self.config.clone();
        let bc1 = 1.0 - (c.beta1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (c.beta2 as f64).powi(self.t as i32);
        let (bc1, bc2) = (bc1 as f32, bc2 as f32);
        let decay = 1.0 - c.learning_rate * c.weight_decay;
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut("", &mut |_, p| {
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                p.value[i] = p.value[i] * decay - c.learning_rate * update;
            }
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Linear, Module};
    use rand::SeedableRng;

    #[test]
    fn zero_gradient_only_decays() {
        let mut lin = Linear::new(3, 2, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        let before = lin.weight.value.clone();
        let cfg = AdamWConfig { learning_rate: 0.1, weight_decay: 0.5, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &lin);
        opt.step(&mut lin);
        opt.step(&mut lin);
        for (a, b) in lin.weight.value.iter().zip(&before) {
            assert!((a - b * 0.95 * 0.95).abs() < 1e-7);
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut lin = Linear::new(2, 1, &mut rand_chacha::ChaCha8Rng::seed_from_u64(2));
        lin.weight.grad = vec![0.3, -2.0];
        let before = lin.weight.value.clone();
        let cfg = AdamWConfig { learning_rate: 0.01, weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &lin);
        opt.step(&mut lin);
        assert!((lin.weight.value[0] - (before[0] - 0.01)).abs() < 1e-6);
        assert!((lin.weight.value[1] - (before[1] + 0.01)).abs() < 1e-6);
        assert_eq!(lin.num_params(), 3);
    }
}
