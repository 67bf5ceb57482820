//! Named parameter storage shared by all neural models.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]; each forward pass binds the
//! whole store onto a tape as gradient-tracked leaves.

use std::ops::Index;

use rand::Rng;

use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    /// Non-trainable state (batch-norm running statistics).
    buffer_names: Vec<String>,
    buffers: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> BufferId {
        self.buffer_names.push(name.into());
        self.buffers.push(value);
        BufferId(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn buffer_names(&self) -> &[String] {
        &self.buffer_names
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Tensor] {
        &mut self.buffers
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter on `tape` as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|t| tape.param(t.clone())).collect(),
        }
    }
}

/// Tape handles for a bound [`ParamStore`], indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps externally created leaves (one per store parameter, same order).
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients for every parameter, zero where none flowed.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars.iter().map(|&v| tape.grad_or_zero(v)).collect()
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Uniform(-bound, bound) with `bound = 1/sqrt(fan_in)`.
pub fn uniform_init(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
        .expect("init shape is valid")
}
