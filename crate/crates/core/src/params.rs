//! Named parameter storage. Sharing a parameter between model streams means
//! handing out the same [`ParamId`]; there is one tensor per id.

use crate::autograd::{Tape, Var};
use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// `false` for buffers such as batch-norm running statistics.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|p| p.name == name) {
            bail!(Config, "duplicate parameter name {name}");
        }
        self.entries.push(Param {
            name,
            tensor,
            trainable,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.entries.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Records every trainable parameter on `tape` as one gradient-tracked
    /// leaf. Buffers are recorded as constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        let vars = self
            .entries
            .iter()
            .map(|p| {
                let t = p.tensor.clone();
                if p.trainable {
                    tape.variable(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        Bound { vars }
    }

    /// Adds the tape gradients of every bound trainable parameter into the
    /// parameter tensors' gradient slots.
    pub fn accumulate_grads(&mut self, bound: &Bound<'_, T>) -> Result<()> {
        if bound.vars.len() != self.entries.len() {
            bail!(Contract, "binding does not belong to this parameter store");
        }
        for (p, v) in self.entries.iter_mut().zip(&bound.vars) {
            if !p.trainable {
                continue;
            }
            if let Some(g) = v.grad() {
                p.tensor.accumulate_grad(g.data())?;
            }
        }
        Ok(())
    }
}

/// Tape handles for a [`ParamStore`], indexed by [`ParamId`].
pub struct Bound<'t, T> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    /// Routes every read of `id` to `var` instead.
    pub fn replace(&mut self, id: ParamId, var: Var<'t, T>) {
        self.vars[id.0] = var;
    }
}
