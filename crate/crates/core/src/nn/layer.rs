use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Tanh,
    Sigmoid,
}

/// `y = act(x Wᵀ + b)` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl Dense {
    /// Glorot-uniform weights in `±sqrt(6/(in+out))`, zero bias.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = libm::sqrt(6.0 / (inputs + outputs) as f64);
        let w: Vec<f64> = (0..inputs * outputs).map(|_| rng.gen_range(-limit..=limit)).collect();
        let weight = store.add(format!("{name}.weight"), Tensor::from_vec(outputs, inputs, w).expect("weight shape"));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, outputs));
        Self { weight, bias, inputs, outputs, activation }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let z = tape.matmul_t(x, w);
        let z = tape.add_bias(z, b);
        match self.activation {
            Activation::Linear => z,
            Activation::Tanh => tape.tanh(z),
            Activation::Sigmoid => tape.sigmoid(z),
        }
    }

    /// Zeroes weight and bias so the layer outputs `act(0)`.
    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(self.bias).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Stack of dense layers: hidden layers share one activation, the last has its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `sizes = [in, hidden.., out]`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                Dense::new(store, &format!("{name}.{i}"), sizes[i], sizes[i + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        self.layers.iter().fold(x, |h, layer| layer.forward(tape, store, h))
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn last(&self) -> &Dense {
        &self.layers[self.layers.len() - 1]
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }
}
