//! Differentiable building blocks. Every layer owns only [`ParamId`]s; the
//! values live in a shared [`ParamStore`] so the optimizer and checkpoints
//! see one flat, ordered parameter list.

mod conv;
mod gcn;
mod recurrent;

pub use conv::{CausalConv1d, EdTcn, EdTcnConfig, Normalization};
pub use gcn::GcnLayer;
pub use recurrent::RecurrentStack;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// One forward pass: a fresh tape, read-only parameters, and the dropout
/// generator when training.
pub struct Ctx<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    params: Vec<Option<Var>>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'s> Ctx<'s> {
    /// Inference context: dropout is the identity.
    pub fn eval(store: &'s ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            params: vec![None; store.len()],
            dropout_rng: None,
        }
    }

    /// Training context whose dropout masks come from `seed`.
    pub fn train(store: &'s ParamStore, seed: u64) -> Self {
        Self {
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Self::eval(store)
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Tape leaf for a parameter, recorded once per context.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.params[id.index()] {
            return v;
        }
        let v = self.tape.param(self.store, id);
        self.params[id.index()] = Some(v);
        v
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        match self.dropout_rng.as_mut() {
            Some(rng) if p > 0.0 => self.tape.dropout(x, p, rng),
            _ => x,
        }
    }
}

/// Glorot-uniform initialization.
pub(crate) fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// Fully connected layer `y = x W + b` with `W` stored `in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(rng, &[inputs, outputs], inputs, outputs));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        let y = ctx.tape.matmul(x, w);
        ctx.tape.add_bias(y, b)
    }
}
