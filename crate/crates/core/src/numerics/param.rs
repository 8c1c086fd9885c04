use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learnable tensor with its gradient accumulator and AdamW moments.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    first_moment: Tensor,
    second_moment: Tensor,
}

impl Parameter {
    fn new(name: String, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self {
            name,
            value,
            grad: Tensor::zeros(shape.clone()),
            first_moment: Tensor::zeros(shape.clone()),
            second_moment: Tensor::zeros(shape),
        }
    }

    pub fn first_moment(&self) -> &Tensor {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &Tensor {
        &self.second_moment
    }
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds `grads[i]` into parameter `i`'s accumulator.
    pub fn accumulate(&mut self, grads: &[Option<Tensor>]) -> Result<()> {
        for (p, g) in self.params.iter_mut().zip(grads) {
            if let Some(g) = g {
                p.grad
                    .add_assign(g)
                    .map_err(|e| Error::Shape(format!("gradient for {}: {e}", p.name)))?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so the global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let c = max_norm / norm;
            for p in &mut self.params {
                p.grad.scale(c);
            }
        }
        norm
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamW {
    /// One decoupled-weight-decay Adam update. `step_index` counts from 1.
    /// Gradients are zeroed afterwards.
    pub fn step(&self, store: &mut ParamStore, lr: f64, step_index: u64) -> Result<()> {
        adamw_step(
            store,
            lr,
            (self.beta1, self.beta2),
            self.eps,
            self.weight_decay,
            step_index,
        )
    }
}

pub fn adamw_step(
    store: &mut ParamStore,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
    step_index: u64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if step_index == 0 {
        return Err(Error::InvalidArgument("step_index counts from 1".into()));
    }
    let (b1, b2) = betas;
    let t = step_index.min(i32::MAX as u64) as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for p in &mut store.params {
        let w = p.value.data_mut();
        let g = p.grad.data();
        let m = p.first_moment.data_mut();
        let v = p.second_moment.data_mut();
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            w[i] -= lr * weight_decay * w[i];
            w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        p.grad.data_mut().fill(0.0);
    }
    Ok(())
}
