//! Named parameter storage shared by the model, optimizer, and checkpoints.

use std::ops::Index;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, NodeId};
use crate::error::Result;
use crate::tensor::Tensor;

/// Standard deviation of the truncated-normal projection init.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Tokenizer,
    Block,
    Router,
    KeepRatio,
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in store order.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Graph nodes of every parameter for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound(Vec<NodeId>);

impl Bound {
    /// Wraps externally created nodes, one per parameter in store order.
    pub fn from_nodes(nodes: Vec<NodeId>) -> Self {
        Self(nodes)
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = NodeId;

    fn index(&self, id: ParamId) -> &NodeId {
        &self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, group, tensor: tensor.with_requires_grad(true) });
        ParamId(self.params.len() - 1)
    }

    pub fn trunc_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        rng: &mut R,
    ) -> ParamId {
        self.add(name, group, Tensor::trunc_normal(shape, INIT_STD, rng))
    }

    pub fn zeros(&mut self, name: impl Into<String>, group: ParamGroup, shape: &[usize]) -> ParamId {
        self.add(name, group, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, group: ParamGroup, shape: &[usize]) -> ParamId {
        self.add(name, group, Tensor::ones(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn set_trainable(&mut self, group: ParamGroup, trainable: bool) {
        self.params
            .iter_mut()
            .filter(|p| p.group == group)
            .for_each(|p| p.tensor.requires_grad = trainable);
    }

    /// Adds every parameter to `g`; with `trainable == false` all become constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Bound> {
        self.params
            .iter()
            .map(|p| {
                let rg = trainable && p.tensor.requires_grad;
                g.leaf(p.tensor.clone().with_requires_grad(rg))
            })
            .collect::<Result<Vec<_>>>()
            .map(Bound)
    }

    /// Adds `scale · ∂loss/∂p` into each parameter's grad buffer.
    pub fn accumulate_grads(&mut self, bound: &Bound, grads: &Gradients, scale: f64) {
        for (p, &node) in self.params.iter_mut().zip(&bound.0) {
            if let Some(g) = grads.get(node) {
                let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                p.tensor.accumulate_grad(&scaled);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }
}
