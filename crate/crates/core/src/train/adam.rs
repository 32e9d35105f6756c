use serde::{Deserialize, Serialize};

use crate::tensor::{Gradients, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("non-finite gradient {value} in parameter {param} at element {index}")]
pub struct NonFiniteGradient {
    pub param: String,
    pub index: usize,
    pub value: f64,
}

/// First and second moment buffers, one per parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// Bias-corrected Adam update. Parameters without a gradient are updated
    /// as if their gradient were zero. Nothing is modified when any gradient
    /// is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<(), NonFiniteGradient> {
        for (id, g) in grads.params() {
            if let Some((index, &value)) = g.data().iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(NonFiniteGradient {
                    param: store.name(id).to_string(),
                    index,
                    value,
                });
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads.param(id);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.map_or(0.0, |g| g.data()[k]);
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn grads_for(store: &ParamStore, scale: f64) -> Gradients {
        let mut tape = Tape::new();
        let id = store.ids().next().unwrap();
        let x = tape.param(store, id);
        let s = tape.sum(x);
        let l = tape.scale(s, scale);
        tape.backward(l)
    }

    fn one_param(value: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(value));
        store
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = one_param(2.5);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let g = grads_for(&store, 0.0);
        adam.step(&mut store, &g, 0.1).unwrap();
        assert_eq!(store.get(store.ids().next().unwrap()).data(), &[2.5]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_unit_step_moves_by_lr() {
        let mut store = one_param(0.0);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let g = grads_for(&store, 1.0);
        adam.step(&mut store, &g, 0.01).unwrap();
        let w = store.get(store.ids().next().unwrap()).data()[0];
        assert!((w + 0.01).abs() < 1e-9, "{w}");
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let mut store = one_param(1.0);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let g = grads_for(&store, f64::NAN);
        let err = adam.step(&mut store, &g, 0.1).unwrap_err();
        assert_eq!(err.param, "w");
        assert_eq!(adam.step, 0);
        assert_eq!(store.get(store.ids().next().unwrap()).data(), &[1.0]);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut store = one_param(3.0);
            let mut adam = AdamState::new(&store, AdamConfig::default());
            let mut trace = Vec::new();
            for k in 0..50 {
                let g = grads_for(&store, (k as f64 * 0.37).sin());
                adam.step(&mut store, &g, 0.05).unwrap();
                trace.push(store.get(store.ids().next().unwrap()).data()[0].to_bits());
            }
            trace
        };
        assert_eq!(run(), run());
    }
}
