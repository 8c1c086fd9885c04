//! Reverse-mode differentiation over an explicit tape of op records.
//!
//! Every differentiable operation implements [`Op`]: a forward pass over
//! input values and a vector-Jacobian product mapping the output cotangent
//! back onto each input. The tape stores the forward values, so a VJP can
//! read inputs and output without recomputation.

use std::collections::HashMap;

use crate::error::{shape_err, Result};
use crate::numerics::{ParamId, ParamStore, Tensor};

pub trait Op: Send {
    fn name(&self) -> &'static str;

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Cotangents for each input. `needs[i]` is false for inputs that do not
    /// require a gradient; an op may return `None` for those.
    fn vjp(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum NodeKind {
    Constant,
    Input,
    Param(ParamId),
    Op { op: Box<dyn Op>, inputs: Vec<Var> },
}

struct Node {
    value: Tensor,
    kind: NodeKind,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            record: true,
        }
    }

    /// A tape that evaluates ops without keeping records for backward.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, kind: NodeKind, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            kind,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, NodeKind::Constant, false)
    }

    /// Leaf that receives a gradient in [`Tape::backward`].
    pub fn input(&mut self, value: Tensor) -> Var {
        let rg = self.record;
        self.push(value, NodeKind::Input, rg)
    }

    /// Leaf holding the current value of a parameter; repeated calls return
    /// the same variable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let rg = self.record;
        let v = self.push(store.value(id).clone(), NodeKind::Param(id), rg);
        self.params.insert(id, v);
        v
    }

    /// Routes later `param(store, id)` lookups to an existing variable.
    pub fn bind_param(&mut self, id: ParamId, var: Var) {
        self.params.insert(id, var);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn apply(&mut self, mut op: impl Op + 'static, inputs: &[Var]) -> Result<Var> {
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            op.forward(&vals)?
        };
        value.ensure_finite(op.name())?;
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if requires_grad {
            Ok(self.push(
                value,
                NodeKind::Op {
                    op: Box::new(op),
                    inputs: inputs.to_vec(),
                },
                true,
            ))
        } else {
            Ok(self.push(value, NodeKind::Constant, false))
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape().to_vec(), 1.0));
        let mut leaves = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.kind {
                NodeKind::Constant => {}
                NodeKind::Input | NodeKind::Param(_) => {
                    leaves.insert(i, g);
                }
                NodeKind::Op { op, inputs } => {
                    let needs: Vec<bool> = inputs
                        .iter()
                        .map(|v| self.nodes[v.0].requires_grad)
                        .collect();
                    let vals: Vec<&Tensor> =
                        inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let in_grads = op.vjp(&vals, &node.value, &g, &needs)?;
                    for ((v, ig), need) in inputs.iter().zip(in_grads).zip(&needs) {
                        let (Some(ig), true) = (ig, *need) else {
                            continue;
                        };
                        if ig.shape() != self.nodes[v.0].value.shape() {
                            return shape_err(format!(
                                "{} produced gradient {:?} for input {:?}",
                                op.name(),
                                ig.shape(),
                                self.nodes[v.0].value.shape()
                            ));
                        }
                        match &mut grads[v.0] {
                            Some(acc) => acc.add_assign(&ig)?,
                            slot @ None => *slot = Some(ig),
                        }
                    }
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.kind {
                NodeKind::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { leaves, params })
    }
}

/// Leaf gradients produced by one backward sweep.
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Dense per-parameter gradient list indexed by `ParamId`.
    pub fn into_param_grads(mut self, n_params: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();
        for (id, v) in &self.params {
            if let Some(g) = self.leaves.remove(&v.0) {
                out[id.0] = Some(g);
            }
        }
        out
    }
}
