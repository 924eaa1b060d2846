//! Fully connected networks shared by the user encoders and the base-station
//! decoder.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::SimRng;
use crate::tensor::Tensor;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[1, out]`
    pub bias: Tensor,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// An [`MlpParams`] whose tensors live on a [`Graph`].
#[derive(Debug, Clone)]
pub struct BoundMlp {
    layers: Vec<(Var, Var, Activation)>,
}

impl BoundMlp {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        for &(w, b, act) in &self.layers {
            h = g.linear(h, w, b);
            if act == Activation::Tanh {
                h = g.tanh(h);
            }
        }
        h
    }

    /// Parameter handles in `(weight, bias)` order per layer.
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b, _)| [w, b]).collect()
    }
}

impl MlpParams {
    /// Tanh hidden layers and a linear output; weights `N(0, 1/fan_in)`, zero biases.
    pub fn init(widths: &[usize], rng: &mut SimRng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, pair)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive scale");
                let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
                Layer {
                    weight: Tensor::from_vec(fan_out, fan_in, data),
                    bias: Tensor::zeros(1, fan_out),
                    activation: if i == last {
                        Activation::Identity
                    } else {
                        Activation::Tanh
                    },
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty network").weight.rows()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(|l| l.weight.rows()));
        w
    }

    pub fn bind(&self, g: &mut Graph) -> BoundMlp {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (g.param(l.weight.clone()), g.param(l.bias.clone()), l.activation))
                .collect(),
        }
    }

    /// Plain forward pass.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let xv = g.constant(x.clone());
        let out = bound.apply(&mut g, xv);
        g.value(out).clone()
    }

    /// Tensors in the order of [`BoundMlp::vars`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}
