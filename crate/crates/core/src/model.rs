//! GCN backbone plus segmentation and risk heads, in the four studied
//! variants.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{AdjacencySet, SkeletonTopology};
use crate::layers::{Ctx, EdTcn, EdTcnConfig, GcnLayer, Linear, RecurrentStack};
use crate::tensor::{ParamStore, Tensor, Var};

/// Coordinates per joint.
pub const COORDS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelVariant {
    /// Segmentation head only.
    #[serde(rename = "stl-as")]
    StlAs,
    /// Risk regression head only.
    #[serde(rename = "stl-pa")]
    StlPa,
    /// Shared backbone, independent heads.
    #[serde(rename = "mtl-base")]
    MtlBase,
    /// Segmentation softmax concatenated onto the regressor input.
    #[serde(rename = "mtl-emb")]
    MtlEmb,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [Self::StlAs, Self::StlPa, Self::MtlBase, Self::MtlEmb];

    pub fn has_segmentation(self) -> bool {
        !matches!(self, Self::StlPa)
    }

    pub fn has_regression(self) -> bool {
        !matches!(self, Self::StlAs)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::StlAs => "stl-as",
            Self::StlPa => "stl-pa",
            Self::MtlBase => "mtl-base",
            Self::MtlEmb => "mtl-emb",
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown model variant {0:?} (expected stl-as, stl-pa, mtl-base or mtl-emb)")]
pub struct UnknownVariant(pub String);

impl FromStr for ModelVariant {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| UnknownVariant(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub classes: usize,
    /// Output channels of the stacked GCN layers.
    pub gcn_channels: Vec<usize>,
    /// Width of the adaptive pool applied to the flattened per-frame map.
    pub pooled_width: usize,
    pub tcn: EdTcnConfig,
    /// Width of the tanh layer in front of the recurrent stack.
    pub regressor_width: usize,
    pub recurrent_hidden: usize,
    pub recurrent_layers: usize,
}

impl ModelConfig {
    pub fn new(variant: ModelVariant, classes: usize) -> Self {
        Self {
            variant,
            classes,
            gcn_channels: vec![64, 128, 256],
            pooled_width: 2048,
            tcn: EdTcnConfig::default(),
            regressor_width: 256,
            recurrent_hidden: 128,
            recurrent_layers: 3,
        }
    }

    /// Width of the flattened per-frame backbone map for `joints` joints.
    pub fn flattened_width(&self, joints: usize) -> usize {
        self.gcn_channels.last().copied().unwrap_or(COORDS) * joints
    }

    pub fn regressor_input_width(&self) -> usize {
        match self.variant {
            ModelVariant::MtlEmb => self.pooled_width + self.classes,
            _ => self.pooled_width,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Regressor {
    pub input: Linear,
    pub recurrent: RecurrentStack,
    pub output: Linear,
}

/// Taped outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub features: Var,
    pub logits: Option<Var>,
    pub risk: Option<Var>,
}

/// Plain per-frame predictions. Heads the variant lacks are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    /// `T x Cl`.
    pub logits: Option<Tensor>,
    /// `T x Cl`, rows summing to one.
    pub probabilities: Option<Tensor>,
    pub risk: Option<Vec<f64>>,
}

impl ModelOutput {
    pub fn frames(&self) -> usize {
        self.logits
            .as_ref()
            .map(|l| l.rows())
            .or(self.risk.as_ref().map(Vec::len))
            .unwrap_or(0)
    }

    /// Arg-max class per frame.
    pub fn labels(&self) -> Option<Vec<usize>> {
        let l = self.logits.as_ref()?;
        Some(
            (0..l.rows())
                .map(|t| {
                    let row = l.row(t);
                    (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
                })
                .collect(),
        )
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub topology: SkeletonTopology,
    pub adjacency: AdjacencySet,
    pub backbone: Vec<GcnLayer>,
    pub segmentation: Option<EdTcn>,
    pub regressor: Option<Regressor>,
}

impl Model {
    /// Builds the model and registers freshly initialized parameters in
    /// `store`. Parameter names depend only on the config, so a checkpoint
    /// can be loaded into a store built the same way.
    pub fn new(config: ModelConfig, topology: SkeletonTopology, store: &mut ParamStore, seed: u64) -> Self {
        assert!(config.classes >= 1, "at least one class");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adjacency = AdjacencySet::new(&topology);
        let n = topology.joint_count();
        let mut backbone = Vec::new();
        let mut width = COORDS;
        for (i, &c) in config.gcn_channels.iter().enumerate() {
            backbone.push(GcnLayer::new(store, &format!("gcn{i}"), n, width, c, true, &mut rng));
            width = c;
        }
        let flat = config.flattened_width(n);
        assert!(
            config.pooled_width >= 1 && config.pooled_width <= flat,
            "pooled width {} must be in 1..={flat}",
            config.pooled_width
        );
        let segmentation = config.variant.has_segmentation().then(|| {
            EdTcn::new(store, "tcn", config.pooled_width, config.classes, config.tcn.clone(), &mut rng)
        });
        let regressor = config.variant.has_regression().then(|| Regressor {
            input: Linear::new(store, "reg.input", config.regressor_input_width(), config.regressor_width, &mut rng),
            recurrent: RecurrentStack::new(
                store,
                "reg.lstm",
                config.regressor_width,
                config.recurrent_hidden,
                config.recurrent_layers,
                &mut rng,
            ),
            output: Linear::new(store, "reg.output", config.recurrent_hidden, 1, &mut rng),
        });
        Self {
            config,
            topology,
            adjacency,
            backbone,
            segmentation,
            regressor,
        }
    }

    pub fn joint_count(&self) -> usize {
        self.topology.joint_count()
    }

    /// Sets the regressor's output bias, e.g. to the mean training target.
    pub fn set_risk_offset(&self, store: &mut ParamStore, offset: f64) {
        if let Some(r) = &self.regressor {
            *store.get_mut(r.output.bias) = Tensor::scalar(offset);
        }
    }

    /// Per-frame features `T x pooled_width` from `joints` shaped
    /// `T x N x 3` (or `T x 3N`, joint-major).
    pub fn backbone_forward(&self, ctx: &mut Ctx, joints: &Tensor) -> Var {
        let n = self.joint_count();
        assert_eq!(joints.len() % (n * COORDS), 0, "joint tensor does not hold whole {n}-joint frames");
        let t = joints.len() / (n * COORDS);
        assert!(t >= 1, "empty sequence");
        let mut x = ctx.tape.constant(joints.clone().reshaped(&[t * n, COORDS]));
        for layer in &self.backbone {
            x = layer.forward(ctx, x, &self.adjacency);
        }
        let c = self.config.gcn_channels.last().copied().unwrap_or(COORDS);
        let x = ctx.tape.reshape(x, &[t, n * c]);
        // joint-major -> channel-major flattening
        let x = ctx.tape.permute_frames(x, t, n, c);
        if self.config.pooled_width == n * c {
            x
        } else {
            ctx.tape.adaptive_avg_pool(x, self.config.pooled_width)
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, joints: &Tensor) -> ForwardVars {
        let features = self.backbone_forward(ctx, joints);
        let logits = self.segmentation.as_ref().map(|h| h.forward(ctx, features));
        let risk = self.regressor.as_ref().map(|r| {
            let input = match (self.config.variant, logits) {
                (ModelVariant::MtlEmb, Some(l)) => {
                    let p = ctx.tape.softmax_rows(l);
                    ctx.tape.concat_cols(features, p)
                }
                _ => features,
            };
            let h = r.input.forward(ctx, input);
            let h = ctx.tape.tanh(h);
            let h = r.recurrent.forward(ctx, h);
            r.output.forward(ctx, h)
        });
        ForwardVars {
            features,
            logits,
            risk,
        }
    }

    /// Inference pass returning plain tensors.
    pub fn predict(&self, store: &ParamStore, joints: &Tensor) -> ModelOutput {
        let mut ctx = Ctx::eval(store);
        let out = self.forward(&mut ctx, joints);
        let logits = out.logits.map(|l| ctx.tape.value(l).clone());
        let probabilities = logits.as_ref().map(|l| {
            let mut p = l.clone();
            let cl = p.cols();
            p.data_mut().chunks_mut(cl).for_each(crate::tensor::softmax_in_place);
            p
        });
        let risk = out.risk.map(|r| ctx.tape.value(r).data().to_vec());
        ModelOutput {
            logits,
            probabilities,
            risk,
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::tensor::{grad_check_params, Tape};

    pub(crate) fn small_config(variant: ModelVariant, classes: usize) -> ModelConfig {
        ModelConfig {
            gcn_channels: vec![4, 5],
            pooled_width: 7,
            tcn: EdTcnConfig {
                kernel_size: 3,
                hidden: [4, 5],
                fc_hidden: 4,
                normalization: crate::layers::Normalization::Relu,
                ..EdTcnConfig::default()
            },
            regressor_width: 4,
            recurrent_hidden: 3,
            ..ModelConfig::new(variant, classes)
        }
    }

    fn tiny_topology() -> SkeletonTopology {
        SkeletonTopology::parse("joint a root\njoint b\njoint c\njoint d\nedge a b\nedge b c\nedge a d\n").unwrap()
    }

    fn random_joints(rng: &mut ChaCha8Rng, t: usize, n: usize) -> Tensor {
        Tensor::from_fn(&[t, n, COORDS], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn variant_names_round_trip() {
        for v in ModelVariant::ALL {
            assert_eq!(v.to_string().parse::<ModelVariant>().unwrap(), v);
        }
        assert!("mtl".parse::<ModelVariant>().is_err());
    }

    #[test]
    fn default_backbone_widths() {
        let config = ModelConfig::new(ModelVariant::MtlEmb, 17);
        assert_eq!(config.flattened_width(15), 3840);
        assert_eq!(config.pooled_width, 2048);
        assert_eq!(config.regressor_input_width(), 2065);
        let mut store = ParamStore::new();
        let model = Model::new(config, SkeletonTopology::canonical(), &mut store, 0);
        assert_eq!(model.backbone[0].inputs, 3);
        assert_eq!(model.backbone[0].outputs, 64);
        assert_eq!(model.regressor.as_ref().unwrap().input.inputs, 2065);
        assert_eq!(model.segmentation.as_ref().unwrap().classes(), 17);
    }

    #[test]
    fn variants_expose_only_their_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_joints(&mut rng, 9, 4);
        for v in ModelVariant::ALL {
            let mut store = ParamStore::new();
            let model = Model::new(small_config(v, 3), tiny_topology(), &mut store, 1);
            let out = model.predict(&store, &x);
            assert_eq!(out.logits.is_some(), v.has_segmentation());
            assert_eq!(out.risk.is_some(), v.has_regression());
            assert_eq!(out.frames(), 9);
            if let Some(p) = &out.probabilities {
                for t in 0..9 {
                    assert!((p.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn time_constant_input_gives_time_constant_features() {
        let mut store = ParamStore::new();
        let model = Model::new(small_config(ModelVariant::StlAs, 3), tiny_topology(), &mut store, 2);
        let frame: Vec<f64> = (0..12).map(|k| (k as f64 * 0.37).sin()).collect();
        let x = Tensor::new(&[5, 4, 3], frame.iter().copied().cycle().take(60).collect());
        let mut ctx = Ctx::eval(&store);
        let f = model.backbone_forward(&mut ctx, &x);
        let f = ctx.tape.value(f);
        for t in 1..5 {
            assert_eq!(f.row(t), f.row(0));
        }
    }

    fn loss_on(tape: &mut Tape, v: Var) -> Var {
        let s = tape.tanh(v);
        tape.sum(s)
    }

    #[test]
    fn base_heads_are_isolated() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let model = Model::new(small_config(ModelVariant::MtlBase, 3), tiny_topology(), &mut store, 4);
        let x = random_joints(&mut rng, 8, 4);
        let tcn_only: Vec<_> = store.ids().filter(|id| store.name(*id).starts_with("tcn.")).collect();
        let reg_only: Vec<_> = store.ids().filter(|id| store.name(*id).starts_with("reg.")).collect();
        let backbone: Vec<_> = store.ids().filter(|id| store.name(*id).starts_with("gcn")).collect();

        let mut ctx = Ctx::eval(&store);
        let out = model.forward(&mut ctx, &x);
        let l = loss_on(&mut ctx.tape, out.risk.unwrap());
        let g = ctx.tape.backward(l);
        assert!(tcn_only.iter().all(|id| g.param(*id).is_none()));
        assert!(backbone.iter().any(|id| g.param(*id).is_some_and(|t| t.max_abs_diff(&t.map(|_| 0.0)) > 0.0)));

        let mut ctx = Ctx::eval(&store);
        let out = model.forward(&mut ctx, &x);
        let l = loss_on(&mut ctx.tape, out.logits.unwrap());
        let g = ctx.tape.backward(l);
        assert!(reg_only.iter().all(|id| g.param(*id).is_none()));
        assert!(backbone.iter().any(|id| g.param(*id).is_some_and(|t| t.max_abs_diff(&t.map(|_| 0.0)) > 0.0)));
    }

    #[test]
    fn fused_regressor_reaches_segmentation_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let model = Model::new(small_config(ModelVariant::MtlEmb, 3), tiny_topology(), &mut store, 4);
        let x = random_joints(&mut rng, 8, 4);
        let mut ctx = Ctx::eval(&store);
        let out = model.forward(&mut ctx, &x);
        let l = loss_on(&mut ctx.tape, out.risk.unwrap());
        let g = ctx.tape.backward(l);
        let head = model.segmentation.as_ref().unwrap();
        let w = g.param(head.classifier.weight).expect("classifier weight gradient");
        assert!(w.data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn outputs_keep_frame_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let model = Model::new(small_config(ModelVariant::MtlEmb, 2), tiny_topology(), &mut store, 4);
        for t in 1..=20 {
            let out = model.predict(&store, &random_joints(&mut rng, t, 4));
            assert_eq!(out.logits.unwrap().rows(), t);
            assert_eq!(out.risk.unwrap().len(), t);
        }
    }

    #[test]
    fn every_variant_passes_grad_check() {
        for v in ModelVariant::ALL {
            for seed in 0..10 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut store = ParamStore::new();
                let model = Model::new(small_config(v, 3), tiny_topology(), &mut store, seed);
                // zero biases put whole receptive fields on the ReLU kink
                let ids: Vec<_> = store.ids().filter(|id| store.name(*id).ends_with("bias")).collect();
                for id in ids {
                    let shape = store.get(id).shape().to_vec();
                    *store.get_mut(id) = Tensor::from_fn(&shape, |_| rng.gen_range(0.1..0.5));
                }
                let x = random_joints(&mut rng, 6, 4);
                let report = grad_check_params(
                    &store,
                    |s| {
                        let mut ctx = Ctx::train(s, 99);
                        let out = model.forward(&mut ctx, &x);
                        let y = match (out.logits, out.risk) {
                            (Some(l), Some(r)) => {
                                let a = ctx.tape.sum(l);
                                let b = ctx.tape.sum(r);
                                ctx.tape.add(a, b)
                            }
                            (Some(l), None) => l,
                            (None, Some(r)) => r,
                            (None, None) => unreachable!(),
                        };
                        (ctx.tape, y)
                    },
                    1e-5,
                    Some(6),
                )
                .unwrap();
                assert!(report.max_rel_error < 1e-4, "{v} seed {seed}: {report:?}");
            }
        }
    }
}
