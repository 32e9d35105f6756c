//! Masked frame-sum losses with learnable, floor-clamped weights.

use crate::layers::Ctx;
use crate::tensor::{ParamId, ParamStore, Tensor, Var};

/// Floor applied to the raw loss weights.
pub const WEIGHT_FLOOR: f64 = 1e-3;

/// Raw parameters for α, β (risk regression) and γ (segmentation term).
/// The effective weight is `max(raw, WEIGHT_FLOOR)`.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub alpha: ParamId,
    pub beta: ParamId,
    pub gamma: ParamId,
}

impl LossWeights {
    /// Registers the three raw weights, each initialized to 1.
    pub fn new(store: &mut ParamStore) -> Self {
        let mut add = |n: &str| store.add(format!("loss.{n}"), Tensor::scalar(1.0));
        Self {
            alpha: add("alpha"),
            beta: add("beta"),
            gamma: add("gamma"),
        }
    }

    /// Looks the weights up by name in a store built by [`LossWeights::new`].
    pub fn find(store: &ParamStore) -> Option<Self> {
        Some(Self {
            alpha: store.id("loss.alpha")?,
            beta: store.id("loss.beta")?,
            gamma: store.id("loss.gamma")?,
        })
    }

    /// Effective `[α, β, γ]`.
    pub fn effective(&self, store: &ParamStore) -> [f64; 3] {
        [self.alpha, self.beta, self.gamma].map(|id| store.get(id).data()[0].max(WEIGHT_FLOOR))
    }

    pub fn ids(&self) -> [ParamId; 3] {
        [self.alpha, self.beta, self.gamma]
    }

    fn effective_var(ctx: &mut Ctx, id: ParamId) -> Var {
        let raw = ctx.param(id);
        ctx.tape.clamp_min(raw, WEIGHT_FLOOR)
    }
}

/// A loss value plus whether every frame was masked out (the value is then 0).
#[derive(Clone, Copy, Debug)]
pub struct MaskedLoss {
    pub value: Var,
    pub all_masked: bool,
}

fn mask_tensor(mask: &[bool], shape: &[usize]) -> Tensor {
    Tensor::new(shape, mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())
}

/// `sum_t mask_t (α (x_t - y_t)^2 + β |x_t - y_t|)`.
///
/// `pred` holds `T` values (any shape); `target` and `mask` have length `T`.
pub fn hpa_loss(ctx: &mut Ctx, pred: Var, target: &[f64], weights: &LossWeights, mask: &[bool]) -> MaskedLoss {
    let shape = ctx.tape.shape(pred).to_vec();
    let t = ctx.tape.value(pred).len();
    assert_eq!(target.len(), t, "target length");
    assert_eq!(mask.len(), t, "mask length");
    let y = ctx.tape.constant(Tensor::new(&shape, target.to_vec()));
    let m = ctx.tape.constant(mask_tensor(mask, &shape));
    let d = ctx.tape.sub(pred, y);
    let d = ctx.tape.mul(d, m);
    let sq = ctx.tape.mul(d, d);
    let sq = ctx.tape.sum(sq);
    let ab = ctx.tape.abs(d);
    let ab = ctx.tape.sum(ab);
    let alpha = LossWeights::effective_var(ctx, weights.alpha);
    let beta = LossWeights::effective_var(ctx, weights.beta);
    let a = ctx.tape.mul(alpha, sq);
    let b = ctx.tape.mul(beta, ab);
    MaskedLoss {
        value: ctx.tape.add(a, b),
        all_masked: !mask.iter().any(|&m| m),
    }
}

/// Frame-summed softmax cross-entropy over unmasked frames.
pub fn has_loss(ctx: &mut Ctx, logits: Var, labels: &[usize], mask: &[bool]) -> MaskedLoss {
    MaskedLoss {
        value: ctx.tape.softmax_xent(logits, labels, mask),
        all_masked: !mask.iter().any(|&m| m),
    }
}

/// `hpa + γ has`.
pub fn mtl_loss(ctx: &mut Ctx, hpa: Var, has: Var, weights: &LossWeights) -> Var {
    let gamma = LossWeights::effective_var(ctx, weights.gamma);
    let g = ctx.tape.mul(gamma, has);
    ctx.tape.add(hpa, g)
}
