use rand_chacha::ChaCha8Rng;

use super::{glorot, Ctx};
use crate::graph::AdjacencySet;
use crate::tensor::{ParamId, ParamStore, Tensor, Var};

/// Partitioned spatial graph convolution with learnable edge importance.
///
/// For one frame with joint features `x` (`N x C_in`) the layer computes
/// `relu(sum_a (M_a * Abar_a) x W_a + b)`, where `Abar_a` is the normalized
/// partition `a`, `M_a` its edge-importance mask (initialized to ones) and
/// `*` the elementwise product.
#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub weights: [ParamId; 3],
    pub masks: [ParamId; 3],
    pub bias: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl GcnLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        joints: usize,
        inputs: usize,
        outputs: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weights = [0, 1, 2].map(|a| {
            store.add(format!("{name}.weight{a}"), glorot(rng, &[inputs, outputs], inputs, outputs))
        });
        let masks = [0, 1, 2].map(|a| store.add(format!("{name}.importance{a}"), Tensor::full(&[joints, joints], 1.0)));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[outputs])));
        Self {
            weights,
            masks,
            bias,
            inputs,
            outputs,
        }
    }

    /// `x` stacks the frames: `(T * N) x C_in`, frame-major. Returns
    /// `(T * N) x C_out`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, adjacency: &AdjacencySet) -> Var {
        let n = adjacency.joint_count();
        let mut acc: Option<Var> = None;
        for a in 0..3 {
            let mask = ctx.param(self.masks[a]);
            let part = ctx.tape.constant(adjacency.normalized_partitions[a].clone());
            let mix = ctx.tape.mul(mask, part);
            let w = ctx.param(self.weights[a]);
            // aggregate on the narrower side of the weight
            let term = if self.inputs <= self.outputs {
                let z = ctx.tape.node_mix(mix, x, n);
                ctx.tape.matmul(z, w)
            } else {
                let z = ctx.tape.matmul(x, w);
                ctx.tape.node_mix(mix, z, n)
            };
            acc = Some(match acc {
                Some(s) => ctx.tape.add(s, term),
                None => term,
            });
        }
        let mut y = acc.expect("three partitions");
        if let Some(b) = self.bias {
            let b = ctx.param(b);
            y = ctx.tape.add_bias(y, b);
        }
        ctx.tape.relu(y)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::graph::SkeletonTopology;
    use crate::tensor::grad_check_params;

    fn three_node_tree() -> AdjacencySet {
        let joints = vec!["a".into(), "b".into(), "c".into()];
        AdjacencySet::new(&SkeletonTopology::new(joints, vec![(0, 1), (0, 2)], 0).unwrap())
    }

    #[test]
    fn single_joint_identity_configuration() {
        let topo = SkeletonTopology::new(vec!["only".into()], vec![], 0).unwrap();
        let adj = AdjacencySet::new(&topo);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = GcnLayer::new(&mut store, "g", 1, 3, 3, false, &mut rng);
        *store.get_mut(layer.weights[0]) = Tensor::from_fn(&[3, 3], |k| if k % 4 == 0 { 1.0 } else { 0.0 });
        let mut ctx = Ctx::eval(&store);
        let x = ctx.tape.constant(Tensor::new(&[1, 3], vec![0.5, 2.0, 0.0]));
        let y = layer.forward(&mut ctx, x, &adj);
        assert_eq!(ctx.tape.value(y).data(), &[0.5, 2.0, 0.0]);
    }

    #[test]
    fn matches_dense_oracle_on_three_node_tree() {
        let adj = three_node_tree();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let layer = GcnLayer::new(&mut store, "g", 3, 2, 4, true, &mut rng);
        for a in 0..3 {
            *store.get_mut(layer.masks[a]) = Tensor::from_fn(&[3, 3], |_| rng.gen_range(0.5..1.5));
        }
        *store.get_mut(layer.bias.unwrap()) = Tensor::from_fn(&[4], |_| rng.gen_range(-0.2..0.2));
        // two frames of 3 joints x 2 channels
        let x = Tensor::from_fn(&[6, 2], |_| rng.gen_range(-1.0..1.0));
        let mut ctx = Ctx::eval(&store);
        let xv = ctx.tape.constant(x.clone());
        let y = layer.forward(&mut ctx, xv, &adj);
        for f in 0..2 {
            let frame = Tensor::new(&[3, 2], x.data()[f * 6..(f + 1) * 6].to_vec());
            let mut want = Tensor::zeros(&[3, 4]);
            for a in 0..3 {
                let masked = Tensor::new(
                    &[3, 3],
                    store
                        .get(layer.masks[a])
                        .data()
                        .iter()
                        .zip(adj.normalized_partitions[a].data())
                        .map(|(m, p)| m * p)
                        .collect(),
                );
                let term = masked.matmul(&frame).matmul(store.get(layer.weights[a]));
                want.data_mut().iter_mut().zip(term.data()).for_each(|(w, t)| *w += t);
            }
            let b = store.get(layer.bias.unwrap()).data();
            for (k, w) in want.data_mut().iter_mut().enumerate() {
                *w = (*w + b[k % 4]).max(0.0);
            }
            let got = &ctx.tape.value(y).data()[f * 12..(f + 1) * 12];
            for (g, w) in got.iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_ones_masks_equal_mask_free_aggregation() {
        let adj = three_node_tree();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let layer = GcnLayer::new(&mut store, "g", 3, 3, 2, false, &mut rng);
        let x = Tensor::from_fn(&[3, 3], |_| rng.gen_range(-1.0..1.0));
        let mut ctx = Ctx::eval(&store);
        let xv = ctx.tape.constant(x.clone());
        let y = layer.forward(&mut ctx, xv, &adj);
        let mut want = Tensor::zeros(&[3, 2]);
        for a in 0..3 {
            let term = adj.normalized_partitions[a].matmul(&x).matmul(store.get(layer.weights[a]));
            want.data_mut().iter_mut().zip(term.data()).for_each(|(w, t)| *w += t);
        }
        let want = want.map(|v| v.max(0.0));
        assert!(ctx.tape.value(y).max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn passes_grad_check_over_seeds() {
        let adj = three_node_tree();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let layer = GcnLayer::new(&mut store, "g", 3, 2, 3, true, &mut rng);
            for a in 0..3 {
                *store.get_mut(layer.masks[a]) = Tensor::from_fn(&[3, 3], |_| rng.gen_range(0.5..1.5));
            }
            let x = Tensor::from_fn(&[6, 2], |_| rng.gen_range(-1.0..1.0));
            let report = grad_check_params(
                &store,
                |s| {
                    let mut ctx = Ctx::eval(s);
                    let xv = ctx.tape.constant(x.clone());
                    let y = layer.forward(&mut ctx, xv, &adj);
                    (ctx.tape, y)
                },
                1e-5,
                None,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }
}
