//! Parameterized building blocks shared by the attention blocks and the model.

use crate::error::Result;
use crate::numerics::{ParamId, ParamStore, Rng, Tape, Tensor, Var};

/// Affine map `x W + b` with `W: [fan_in, fan_out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Uniform `±1/sqrt(fan_in)` weights, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::from_fn([fan_in, fan_out], |_| rng.range(-bound, bound));
        Self::from_values(store, name, w, Tensor::zeros([fan_out]))
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self::from_values(
            store,
            name,
            Tensor::zeros([fan_in, fan_out]),
            Tensor::zeros([fan_out]),
        )
    }

    pub fn from_values(store: &mut ParamStore, name: &str, weight: Tensor, bias: Tensor) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), weight),
            bias: store.add(format!("{name}.bias"), bias),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, Some(b))
    }

    pub fn fan_out(&self, store: &ParamStore) -> usize {
        store.value(self.bias).len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

pub const NORM_EPS: f64 = 1e-6;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full([dim], 1.0)),
            shift: store.add(format!("{name}.shift"), Tensor::zeros([dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let s = tape.param(store, self.shift);
        tape.layer_norm(x, g, s, NORM_EPS)
    }

    pub fn group(&self, tape: &mut Tape, store: &ParamStore, x: Var, groups: usize) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let s = tape.param(store, self.shift);
        tape.group_norm(x, groups, g, s, NORM_EPS)
    }
}

/// Two-layer perceptron with a GELU between.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        rng: &mut Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dims.0, dims.1, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dims.1, dims.2, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, store, h)
    }
}
