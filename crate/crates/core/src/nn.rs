//! Small parameterised building blocks shared by the model modules.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};

/// Affine map `x W + b` on row vectors; `W` is `in x out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, module: &str, name: &str, input: usize, output: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = store.add_xavier(module, &format!("{name}.weight"), input, output, rng);
        let bias = bias.then(|| store.add_zeros(module, &format!("{name}.bias"), 1, output));
        Self { weight, bias }
    }

    /// A zero-initialised layer (weights and bias).
    pub fn zeros(store: &mut ParamStore, module: &str, name: &str, input: usize, output: usize, bias: bool) -> Self {
        let weight = store.add_zeros(module, &format!("{name}.weight"), input, output);
        let bias = bias.then(|| store.add_zeros(module, &format!("{name}.bias"), 1, output));
        Self { weight, bias }
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

    pub fn input_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).rows()
    }

    pub fn output_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Sigmoid,
    Relu,
    LeakyRelu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu => tape.leaky_relu(x, LEAKY_SLOPE),
        }
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;

/// `W2 σ(W1 x + b1) + b2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
    pub activation: Activation,
}

impl Mlp2 {
    #[allow(clippy::too_many_arguments)]
    pub fn new(store: &mut ParamStore, module: &str, name: &str, input: usize, hidden: usize, output: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        Self {
            first: Linear::new(store, module, &format!("{name}.0"), input, hidden, true, rng),
            second: Linear::new(store, module, &format!("{name}.1"), hidden, output, true, rng),
            activation,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.first.forward(tape, store, x);
        let h = self.activation.apply(tape, h);
        self.second.forward(tape, store, h)
    }
}
