use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Ctx;
use crate::tensor::{ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct LstmLayer {
    /// `F x 4H`, gate blocks ordered input, forget, cell, output.
    pub w_ih: ParamId,
    /// `H x 4H`.
    pub w_hh: ParamId,
    /// `4H`.
    pub bias: ParamId,
}

/// Stacked unidirectional LSTM; each layer's hidden sequence feeds the next.
#[derive(Clone, Debug)]
pub struct RecurrentStack {
    pub layers: Vec<LstmLayer>,
    pub hidden: usize,
}

impl RecurrentStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        hidden: usize,
        depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut uniform = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
        let layers = (0..depth)
            .map(|l| {
                let fan_in = if l == 0 { inputs } else { hidden };
                let w_ih = store.add(format!("{name}.layer{l}.w_ih"), uniform(&[fan_in, 4 * hidden]));
                let w_hh = store.add(format!("{name}.layer{l}.w_hh"), uniform(&[hidden, 4 * hidden]));
                // forget gate starts open
                let bias = Tensor::from_fn(&[4 * hidden], |k| if (hidden..2 * hidden).contains(&k) { 1.0 } else { 0.0 });
                let bias = store.add(format!("{name}.layer{l}.bias"), bias);
                LstmLayer { w_ih, w_hh, bias }
            })
            .collect();
        Self { layers, hidden }
    }

    /// `x` is `T x F`; returns the top layer's hidden sequence `T x H`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let mut h = x;
        for layer in &self.layers {
            let w_ih = ctx.param(layer.w_ih);
            let w_hh = ctx.param(layer.w_hh);
            let b = ctx.param(layer.bias);
            let gx = ctx.tape.matmul(h, w_ih);
            let gx = ctx.tape.add_bias(gx, b);
            h = ctx.tape.lstm(gx, w_hh);
        }
        h
    }
}
