//! Dense layers over feature-major batches: one column per sample.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    #[default]
    Silu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: DMatrix::zeros(outputs, inputs),
            bias: DVector::zeros(outputs),
        }
    }

    /// Uniform in `±1/sqrt(fan_in)` for weights and biases.
    pub fn fan_in_uniform(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Linear {
            weight: DMatrix::from_fn(outputs, inputs, |_, _| rng.random_range(-bound..bound)),
            bias: DVector::from_fn(outputs, |_, _| rng.random_range(-bound..bound)),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = &self.weight * x;
        for mut col in y.column_iter_mut() {
            col += &self.bias;
        }
        y
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Two hidden layers with activation, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct MlpTrace {
    inputs: Vec<DMatrix<f64>>,
    pre_activations: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(inputs: usize, hidden: usize, outputs: usize, activation: Activation, rng: &mut Rng) -> Self {
        Mlp {
            layers: vec![
                Linear::fan_in_uniform(inputs, hidden, rng),
                Linear::fan_in_uniform(hidden, hidden, rng),
                Linear::fan_in_uniform(hidden, outputs, rng),
            ],
            activation,
        }
    }

    pub fn zeros(inputs: usize, hidden: usize, outputs: usize, activation: Activation) -> Self {
        Mlp {
            layers: vec![
                Linear::zeros(inputs, hidden),
                Linear::zeros(hidden, hidden),
                Linear::zeros(hidden, outputs),
            ],
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, Linear::outputs)
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let last = self.layers.len() - 1;
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.forward(&cur);
            if i < last {
                cur.apply(|v| *v = self.activation.apply(*v));
            }
        }
        cur
    }

    pub fn forward_vec(&self, x: &[f64]) -> Vec<f64> {
        self.forward(&DMatrix::from_column_slice(x.len(), 1, x)).as_slice().to_vec()
    }

    pub fn forward_traced(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, MlpTrace) {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(last);
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&cur);
            inputs.push(cur);
            cur = if i < last {
                let a = z.map(|v| self.activation.apply(v));
                pre_activations.push(z);
                a
            } else {
                z
            };
        }
        (cur, MlpTrace { inputs, pre_activations })
    }

    /// Accumulates parameter gradients into `grads`; returns d loss / d input.
    pub fn backward(&self, trace: &MlpTrace, grad_out: DMatrix<f64>, grads: &mut MlpGrads) -> DMatrix<f64> {
        let mut g = grad_out;
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                let pre = &trace.pre_activations[i];
                g.zip_apply(pre, |gv, z| *gv *= self.activation.derivative(z));
            }
            let gl = &mut grads.layers[i];
            gl.weight += &g * trace.inputs[i].transpose();
            gl.bias += g.column_sum();
            g = self.layers[i].weight.tr_mul(&g);
        }
        g
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }
}

pub(crate) fn flatten_linears(layers: &[Linear], out: &mut Vec<f64>) {
    for l in layers {
        out.extend_from_slice(l.weight.as_slice());
        out.extend_from_slice(l.bias.as_slice());
    }
}

pub(crate) fn load_linears(layers: &mut [Linear], values: &[f64]) -> usize {
    let mut at = 0;
    for l in layers {
        let n = l.weight.len();
        l.weight.as_mut_slice().copy_from_slice(&values[at..at + n]);
        at += n;
        let n = l.bias.len();
        l.bias.as_mut_slice().copy_from_slice(&values[at..at + n]);
        at += n;
    }
    at
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn zero_network_outputs_zero() {
        let m = Mlp::zeros(3, 5, 2, Activation::Silu);
        assert_eq!(m.forward_vec(&[1.0, -2.0, 3.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_path_with_relu() {
        let mut m = Mlp::zeros(3, 3, 3, Activation::Relu);
        for l in &mut m.layers {
            l.weight = DMatrix::identity(3, 3);
        }
        assert_eq!(m.forward_vec(&[0.5, 2.0, 0.0]), vec![0.5, 2.0, 0.0]);
        assert_eq!(m.forward_vec(&[-1.0, 2.0, 0.0]), vec![0.0, 2.0, 0.0]);
    }

    #[test]
    fn silu_values() {
        assert_eq!(Activation::Silu.apply(0.0), 0.0);
        let expect = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((Activation::Silu.apply(1.0) - expect).abs() < 1e-15);
        assert!((expect - 0.7311).abs() < 1e-4);
        for x in [-3.0, -0.4, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (Activation::Silu.apply(x + h) - Activation::Silu.apply(x - h)) / (2.0 * h);
            assert!((Activation::Silu.derivative(x) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut r = rng::substream(3, &[]);
        let m = Mlp::new(4, 6, 3, Activation::Silu, &mut r);
        let x = DMatrix::from_fn(4, 5, |i, j| ((i * 5 + j) as f64 * 0.37).sin());
        let w = DMatrix::from_fn(3, 5, |i, j| ((i + 2 * j) as f64 * 0.11).cos());
        let objective = |m: &Mlp, x: &DMatrix<f64>| m.forward(x).component_mul(&w).sum();
        let (_, trace) = m.forward_traced(&x);
        let mut grads = m.zero_grads();
        let gx = m.backward(&trace, w.clone(), &mut grads);
        let h = 1e-5;
        for (i, gl) in grads.layers.iter().enumerate() {
            for k in [0, gl.weight.len() / 2, gl.weight.len() - 1] {
                let mut p = m.clone();
                p.layers[i].weight.as_mut_slice()[k] += h;
                let up = objective(&p, &x);
                p.layers[i].weight.as_mut_slice()[k] -= 2.0 * h;
                let fd = (up - objective(&p, &x)) / (2.0 * h);
                assert!((gl.weight.as_slice()[k] - fd).abs() < 1e-7);
            }
        }
        let mut xp = x.clone();
        xp[(2, 3)] += h;
        let up = objective(&m, &xp);
        xp[(2, 3)] -= 2.0 * h;
        let fd = (up - objective(&m, &xp)) / (2.0 * h);
        assert!((gx[(2, 3)] - fd).abs() < 1e-7);
    }
}
