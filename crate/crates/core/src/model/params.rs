use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::tensor::{Gradients, Parameter, Real, Tape, Tensor, Var};

/// Index of a parameter inside [`Model::params`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub heads: Vec<HeadParams>,
    pub w_o: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
}

/// Linear policy heads attached in front of one block.
#[derive(Clone, Debug)]
pub struct DecisionParams {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub block_w: ParamId,
    pub block_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<BlockParams>,
    pub classifier: ParamId,
    /// `None` for blocks without a decision network.
    pub decisions: Vec<Option<DecisionParams>>,
}

/// Which parameters receive gradients during a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    Backbone,
    Decision,
    None,
}

impl Trainable {
    pub fn includes(self, name: &str) -> bool {
        let decision = name.starts_with("decision.");
        match self {
            Trainable::All => true,
            Trainable::Backbone => !decision,
            Trainable::Decision => decision,
            Trainable::None => false,
        }
    }
}

/// Backbone plus decision networks, with all weights in one flat store.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Vec<Parameter<T>>,
    pub layout: Layout,
}

/// Tape handles for every parameter of a model, in store order.
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

struct Builder<'a, T, R> {
    params: Vec<Parameter<T>>,
    rng: &'a mut R,
    normal: Normal<f64>,
}

const INIT_STD: f64 = 0.02;

impl<T: Real, R: Rng> Builder<'_, T, R> {
    fn add(&mut self, name: String, value: Tensor<T>) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    /// Normal(0, 0.02) truncated at two standard deviations.
    fn trunc_normal(&mut self, name: String, shape: &[usize]) -> ParamId {
        let n = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let v = self.normal.sample(self.rng);
            if v.abs() <= 2.0 * INIT_STD {
                data.push(T::of(v));
            }
        }
        let t = Tensor::new(shape, data).expect("shape matches");
        self.add(name, t)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    fn ones(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::ones(shape))
    }
}

impl<T: Real> Model<T> {
    /// Fresh model: truncated-normal projections, zero biases, unit
    /// layernorm gains. Panics if `config` is invalid.
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        config.validate().expect("model config must be valid");
        let d = config.embed_dim;
        let dk = config.head_dim();
        let f = config.ffn_hidden();
        let mut b = Builder {
            params: Vec::new(),
            rng,
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        };
        let embed_w = b.trunc_normal("embed.weight".into(), &[config.patch_dim(), d]);
        let embed_b = b.zeros("embed.bias".into(), &[d]);
        let cls_token = b.trunc_normal("cls_token".into(), &[1, d]);
        let pos_embed = b.trunc_normal("pos_embed".into(), &[config.num_tokens(), d]);
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for l in 0..config.num_blocks {
            let p = |s: &str| format!("blocks.{l}.{s}");
            let ln1_gain = b.ones(p("ln1.gain"), &[d]);
            let ln1_bias = b.zeros(p("ln1.bias"), &[d]);
            let heads = (0..config.num_heads)
                .map(|i| HeadParams {
                    w_q: b.trunc_normal(p(&format!("heads.{i}.w_q")), &[d, dk]),
                    w_k: b.trunc_normal(p(&format!("heads.{i}.w_k")), &[d, dk]),
                    w_v: b.trunc_normal(p(&format!("heads.{i}.w_v")), &[d, dk]),
                })
                .collect();
            let w_o = b.trunc_normal(p("w_o"), &[d, d]);
            let ln2_gain = b.ones(p("ln2.gain"), &[d]);
            let ln2_bias = b.zeros(p("ln2.bias"), &[d]);
            let ffn_w1 = b.trunc_normal(p("ffn.w1"), &[d, f]);
            let ffn_b1 = b.zeros(p("ffn.b1"), &[f]);
            let ffn_w2 = b.trunc_normal(p("ffn.w2"), &[f, d]);
            let ffn_b2 = b.zeros(p("ffn.b2"), &[d]);
            blocks.push(BlockParams {
                ln1_gain,
                ln1_bias,
                heads,
                w_o,
                ln2_gain,
                ln2_bias,
                ffn_w1,
                ffn_b1,
                ffn_w2,
                ffn_b2,
            });
        }
        let classifier = b.trunc_normal("classifier.weight".into(), &[d, config.num_classes]);
        let decisions = (0..config.num_blocks)
            .map(|l| {
                config.has_decision(l).then(|| {
                    let p = |s: &str| format!("decision.{l}.{s}");
                    DecisionParams {
                        patch_w: b.trunc_normal(p("patch.weight"), &[d, 1]),
                        patch_b: b.zeros(p("patch.bias"), &[1]),
                        head_w: b.trunc_normal(p("head.weight"), &[d, config.num_heads]),
                        head_b: b.zeros(p("head.bias"), &[config.num_heads]),
                        block_w: b.trunc_normal(p("block.weight"), &[d, 2]),
                        block_b: b.zeros(p("block.bias"), &[2]),
                    }
                })
            })
            .collect();
        Model {
            config: config.clone(),
            params: b.params,
            layout: Layout {
                embed_w,
                embed_b,
                cls_token,
                pos_embed,
                blocks,
                classifier,
                decisions,
            },
        }
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Same weights at another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    requires_grad: p.requires_grad,
                    grad: p.grad.as_ref().map(Tensor::cast),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// Copies every parameter onto `tape`; only those selected by
    /// `trainable` (and flagged `requires_grad`) are differentiable.
    pub fn leaf_params(&self, tape: &mut Tape<T>, trainable: Trainable) -> ParamVars {
        ParamVars(
            self.params
                .iter()
                .map(|p| {
                    let grad = p.requires_grad && trainable.includes(&p.name);
                    let v = tape.leaf(p.value.clone(), grad);
                    tape.set_label(v, p.name.clone());
                    v
                })
                .collect(),
        )
    }

    /// Per-parameter gradients from a backward pass, in store order.
    pub fn collect_grads(&self, vars: &ParamVars, grads: &mut Gradients<T>) -> Vec<Option<Vec<T>>> {
        vars.0.iter().map(|&v| grads.take(v)).collect()
    }

    /// Copies backbone weights (everything outside the decision networks)
    /// from `other`, which must share this model's config.
    pub fn load_backbone_from(&mut self, other: &Model<T>) {
        assert_eq!(self.config, other.config, "backbone configs differ");
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if !src.name.starts_with("decision.") {
                dst.value = src.value.clone();
            }
        }
    }
}
