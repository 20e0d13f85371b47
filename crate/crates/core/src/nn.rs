//! Small layer building blocks on top of the tape.

use serde::{Deserialize, Serialize};

use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::StreamRng;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Identity => x,
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }
}

/// `y = x W + b` with `W: in x out` and `b: 1 x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, group: ParamGroup, rng: &mut StreamRng) -> Self {
        let weight = store.add_xavier(format!("{name}.weight"), in_dim, out_dim, group, rng);
        let bias = Some(store.add_filled(format!("{name}.bias"), 1, out_dim, 0.0, group));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn without_bias(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, group: ParamGroup, rng: &mut StreamRng) -> Self {
        let weight = store.add_xavier(format!("{name}.weight"), in_dim, out_dim, group, rng);
        Self { weight, bias: None, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Stack of linear layers with an activation between consecutive layers and
/// none after the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], activation: Activation, group: ParamGroup, rng: &mut StreamRng) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least an input and output width");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], group, rng))
            .collect();
        Self { layers, activation }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h);
            if i + 1 < self.layers.len() {
                h = self.activation.apply(tape, h);
            }
        }
        h
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

/// Learnable affine layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        let gain = store.add_filled(format!("{name}.gain"), 1, dim, 1.0, group);
        let bias = store.add_filled(format!("{name}.bias"), 1, dim, 0.0, group);
        Self { gain, bias, eps: 1e-5 }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let n = tape.layer_norm(x, self.eps);
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let y = tape.mul_row(n, g);
        tape.add_row(y, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gain, self.bias]
    }
}
