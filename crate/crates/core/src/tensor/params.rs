use std::collections::HashMap;
use std::ops::Index;

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of learnable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Tape nodes for every parameter of a [`ParamSet`], valid for one tape.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Index<ParamId> for Binding {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Binding {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Registers a trainable tensor under a unique name.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Marks every parameter whose name starts with `prefix` as (not) trainable.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, t) in self.names.iter().zip(&mut self.tensors) {
            if name.starts_with(prefix) {
                t.requires_grad = trainable;
            }
        }
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding {
            vars: self
                .tensors
                .iter()
                .map(|t| {
                    let mut copy = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
                    copy.requires_grad = t.requires_grad;
                    tape.leaf(copy)
                })
                .collect(),
        }
    }

    /// Writes gradients into each trainable tensor's `grad` slot, using zeros
    /// for parameters the loss does not depend on.
    pub fn store_grads(&mut self, binding: &Binding, grads: &Gradients) {
        for (t, &v) in self.tensors.iter_mut().zip(&binding.vars) {
            t.grad = t.requires_grad.then(|| grads.get_or_zero(v, t.len()));
        }
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Replaces parameter values from another set with identical names and shapes.
    pub fn copy_from(&mut self, other: &ParamSet) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                self.len(),
                other.len()
            )));
        }
        for (name, t) in self.names.iter().zip(&self.tensors) {
            let src = other
                .by_name(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    t.shape(),
                    src.shape()
                )));
            }
        }
        for (name, t) in self.names.iter().zip(&mut self.tensors) {
            let src = other.by_name(name).expect("checked above");
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}
