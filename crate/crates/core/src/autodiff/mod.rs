//! Reverse-mode differentiation sized for this crate's models: dense layers,
//! elementwise nonlinearities, grid interpolation, gathers, and reductions.
//!
//! Values are `f64` matrices ([`Tensor`]). A [`Tape`] records one forward
//! evaluation; [`Tape::backward`] propagates a seed to every [`ParamStore`]
//! parameter the expression touched. Shape mismatches at recording time are
//! programming errors and panic (matching `ndarray`'s own conventions);
//! runtime conditions (backward reuse, non-finite gradients) are `Result`s.
//!
//! One tape per thread of execution; tapes are never shared. Parameter
//! writes happen only in [`adam_step`] under single-writer discipline.

mod adam;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use tape::{NodeId, Tape};

use ndarray::Array2;
use thiserror::Error;

/// All tape values are dense `f64` matrices, `[rows, cols]`.
pub type Tensor = Array2<f64>;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("backward already ran on this tape")]
    TapeConsumed,
    #[error("seed shape {seed:?} does not match output shape {output:?}")]
    SeedShape {
        seed: (usize, usize),
        output: (usize, usize),
    },
    #[error("non-finite gradient in parameter '{0}'; step rejected")]
    NonFiniteGradient(String),
    #[error("optimiser state sized for {state} parameters, store has {store}")]
    StateMismatch { state: usize, store: usize },
}

/// Identifies a named parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

struct ParamEntry {
    name: String,
    value: Tensor,
    grad: Tensor,
}

/// Named tensors plus their gradient accumulators. Gradients accumulate
/// additively across any number of backward passes until [`zero_grads`]
/// (or an optimiser step) clears them.
///
/// [`zero_grads`]: ParamStore::zero_grads
#[derive(Default)]
pub struct ParamStore {
    params: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.raw_dim());
        self.params.push(ParamEntry {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
