use rand::Rng;

use super::{gemm, join, Module, Param, View, ViewMut};
use crate::tensor::Matrix;

/// Row-wise affine map `y = x Wᵀ + b`, weight `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f32).sqrt();
        Self {
            inputs,
            outputs,
            weight: Param::uniform(&[outputs, inputs], bound, rng),
            bias: Param::uniform(&[outputs], bound, rng),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        assert_eq!(x.cols, self.inputs, "linear input width");
        let mut y = Matrix::zeros(x.rows, self.outputs);
        for r in 0..x.rows {
            y.row_mut(r).copy_from_slice(&self.bias.value);
        }
        gemm(
            x.rows,
            self.inputs,
            self.outputs,
            1.0,
            View { data: &x.data, offset: 0, rs: self.inputs, cs: 1 },
            View { data: &self.weight.value, offset: 0, rs: 1, cs: self.inputs },
            1.0,
            ViewMut { data: &mut y.data, offset: 0, rs: self.outputs, cs: 1 },
        );
        y
    }

    pub fn backward(&mut self, x: &Matrix, dy: &Matrix) -> Matrix {
        for r in 0..dy.rows {
            for (g, &d) in self.bias.grad.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        gemm(
            self.outputs,
            dy.rows,
            self.inputs,
            1.0,
            View { data: &dy.data, offset: 0, rs: 1, cs: self.outputs },
            View { data: &x.data, offset: 0, rs: self.inputs, cs: 1 },
            1.0,
            ViewMut { data: &mut self.weight.grad, offset: 0, rs: self.inputs, cs: 1 },
        );
        let mut dx = Matrix::zeros(dy.rows, self.inputs);
        gemm(
            dy.rows,
            self.outputs,
            self.inputs,
            1.0,
            View { data: &dy.data, offset: 0, rs: self.outputs, cs: 1 },
            View { data: &self.weight.value, offset: 0, rs: self.inputs, cs: 1 },
            0.0,
            ViewMut { data: &mut dx.data, offset: 0, rs: self.inputs, cs: 1 },
        );
        dx
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
