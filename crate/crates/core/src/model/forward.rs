//! Forward pass of the backbone with optional per-block usage gates.
//!
//! Gates are realized as multiplicative masks so every path shares one
//! implementation: a dropped patch is zeroed, removed from every attention
//! key set and has its sublayer outputs suppressed; a closed head either
//! contributes nothing (full) or passes its value projection through
//! (partial); a closed sublayer leaves only its residual.

use super::params::{ParamVars, Trainable};
use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::policy::{
    draw_noise_diffs, BlockPolicy, GateDecisions, GateProbabilities, GumbelNoise,
    HeadSelectionMode, Policy,
};
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

/// Multiplier applied to a head or a sublayer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    /// Exactly one; no op is recorded.
    Open,
    /// Exactly zero; the gated computation is skipped.
    Closed,
    /// A (possibly relaxed or straight-through) gate value on the tape.
    On(Var),
}

impl Gate {
    fn from_bit(bit: bool) -> Self {
        if bit {
            Gate::Open
        } else {
            Gate::Closed
        }
    }
}

/// Gates for one block. `alive` holds one weight per token row (class
/// token first, always 1); `None` means every row is alive.
#[derive(Clone, Debug)]
pub struct BlockGates {
    pub alive: Option<Var>,
    pub heads: Vec<Gate>,
    pub msa: Gate,
    pub ffn: Gate,
    pub head_mode: HeadSelectionMode,
}

impl BlockGates {
    pub fn open(num_heads: usize) -> Self {
        Self {
            alive: None,
            heads: vec![Gate::Open; num_heads],
            msa: Gate::Open,
            ffn: Gate::Open,
            head_mode: HeadSelectionMode::Full,
        }
    }
}

/// Where per-block gates come from.
pub enum GateSource<'a> {
    /// Gate-free backbone; decision networks never run.
    Vanilla,
    /// Externally supplied hard policy (baselines, tests).
    Fixed(&'a Policy),
    /// Decision networks, hard threshold `p ≥ 0.5`, no noise.
    Eval,
    /// Decision networks with binary Gumbel-Softmax sampling.
    Train {
        tau: f64,
        straight_through: bool,
        /// Decision networks read a copy of the tokens that carries no
        /// gradient back into the backbone.
        detach_input: bool,
        noise: &'a mut GumbelNoise,
    },
}

/// Gate values on the tape for one gated block, used by the usage loss.
#[derive(Clone, Copy, Debug)]
pub struct UsageVars {
    /// Cumulative patch-alive values, `[N, 1]`.
    pub patches: Var,
    pub heads: Var,
    pub block: Var,
    /// Same quantities built from the relaxed (never straight-through) values.
    pub relaxed_patches: Var,
    pub relaxed_heads: Var,
    pub relaxed_block: Var,
}

#[derive(Clone, Debug, Default)]
pub struct BlockTrace {
    pub probabilities: Option<GateProbabilities>,
    pub decisions: Option<GateDecisions>,
    pub usage: Option<UsageVars>,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Var,
    pub blocks: Vec<BlockTrace>,
    /// Realized hard policy; `None` when forward gate values are relaxed.
    pub policy: Option<Policy>,
}

/// Decision-network outputs before the sigmoid.
#[derive(Clone, Copy, Debug)]
pub struct DecisionLogits {
    /// `[N, 1]`, one per patch row.
    pub patches: Var,
    /// `[1, H]`.
    pub heads: Var,
    /// `[1, 2]`: MSA, FFN.
    pub block: Var,
}

/// Raster-scan patches, channels-last within each patch: `[N, P·P·C]`.
pub fn patchify<T: Real>(config: &ModelConfig, image: &[T]) -> Result<Tensor<T>> {
    if image.len() != config.image_len() {
        return Err(Error::Format(format!(
            "image has {} values, config expects {}x{}x{} = {}",
            image.len(),
            config.image_size,
            config.image_size,
            config.channels,
            config.image_len()
        )));
    }
    let (s, p, c, g) = (
        config.image_size,
        config.patch_size,
        config.channels,
        config.grid(),
    );
    let mut out = Vec::with_capacity(image.len());
    for pr in 0..g {
        for pc in 0..g {
            for y in 0..p {
                let row = pr * p + y;
                let start = (row * s + pc * p) * c;
                out.extend_from_slice(&image[start..start + p * c]);
            }
        }
    }
    Ok(Tensor::new(&[config.num_patches(), config.patch_dim()], out)?)
}

/// Token embeddings `[z_cls; z_1 … z_N] + E_pos`, shape `[N + 1, D]`.
pub fn patchify_embed<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    pv: &ParamVars,
    image: &[T],
) -> Result<Var> {
    let l = &model.layout;
    let patches = tape.constant(patchify(&model.config, image)?);
    let proj = tape.matmul(patches, pv.get(l.embed_w))?;
    let proj = tape.add_row(proj, pv.get(l.embed_b))?;
    let tokens = tape.concat(&[pv.get(l.cls_token), proj], 0)?;
    Ok(tape.add(tokens, pv.get(l.pos_embed))?)
}

/// One scaled dot-product attention head over normalized tokens `x`.
/// Returns the head output and its value projection.
pub fn attention_head<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    key_weights: Option<Var>,
) -> Result<(Var, Var), TensorError> {
    let dk = tape.shape(w_q)[1];
    let q = tape.matmul(x, w_q)?;
    let k = tape.matmul(x, w_k)?;
    let v = tape.matmul(x, w_v)?;
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    let attn = match key_weights {
        Some(w) => tape.weighted_softmax(scores, w)?,
        None => tape.softmax(scores, 1)?,
    };
    Ok((tape.matmul(attn, v)?, v))
}

fn one_minus<T: Real>(tape: &mut Tape<T>, g: Var) -> Var {
    let neg = tape.scale(g, -1.0);
    tape.add_const(neg, 1.0)
}

/// Multi-head self-attention on normalized tokens `x` with head selection.
/// Returns `None` when no head contributes (the output is exactly zero).
pub fn msa<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    pv: &ParamVars,
    block: usize,
    x: Var,
    gates: &BlockGates,
) -> Result<Option<Var>> {
    let bp = &model.layout.blocks[block];
    let rows = tape.shape(x)[0];
    let dk = model.config.head_dim();
    let mut outs = Vec::with_capacity(bp.heads.len());
    let mut any = false;
    for (hp, gate) in bp.heads.iter().zip(&gates.heads) {
        let (wq, wk, wv) = (pv.get(hp.w_q), pv.get(hp.w_k), pv.get(hp.w_v));
        let out = match (gates.head_mode, *gate) {
            (_, Gate::Open) => attention_head(tape, x, wq, wk, wv, gates.alive)?.0,
            (HeadSelectionMode::Full, Gate::Closed) => {
                outs.push(tape.constant(Tensor::zeros(&[rows, dk])));
                continue;
            }
            (HeadSelectionMode::Partial, Gate::Closed) => tape.matmul(x, wv)?,
            (HeadSelectionMode::Full, Gate::On(g)) => {
                let (o, _) = attention_head(tape, x, wq, wk, wv, gates.alive)?;
                tape.mul_scalar(o, g)?
            }
            (HeadSelectionMode::Partial, Gate::On(g)) => {
                let (o, v) = attention_head(tape, x, wq, wk, wv, gates.alive)?;
                let kept = tape.mul_scalar(o, g)?;
                let off = one_minus(tape, g);
                let identity = tape.mul_scalar(v, off)?;
                tape.add(kept, identity)?
            }
        };
        any = true;
        outs.push(out);
    }
    if !any {
        return Ok(None);
    }
    let cat = tape.concat(&outs, 1)?;
    Ok(Some(tape.matmul(cat, pv.get(bp.w_o))?))
}

fn gated_residual<T: Real>(
    tape: &mut Tape<T>,
    z: Var,
    update: Var,
    alive: Option<Var>,
    gate: Gate,
) -> Result<Var> {
    let mut u = update;
    if let Some(a) = alive {
        u = tape.scale_rows(u, a)?;
    }
    if let Gate::On(g) = gate {
        u = tape.mul_scalar(u, g)?;
    }
    Ok(tape.add(z, u)?)
}

/// Pre-norm transformer block: `Z' = Z + M_msa·MSA(LN(Z))`,
/// `Z_next = Z' + M_ffn·FFN(LN(Z'))`.
pub fn block_forward<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    pv: &ParamVars,
    block: usize,
    z: Var,
    gates: &BlockGates,
) -> Result<Var> {
    let bp = &model.layout.blocks[block];
    let mut z = z;
    if gates.msa != Gate::Closed {
        let h = tape.layernorm(z, pv.get(bp.ln1_gain), pv.get(bp.ln1_bias))?;
        if let Some(m) = msa(tape, model, pv, block, h, gates)? {
            z = gated_residual(tape, z, m, gates.alive, gates.msa)?;
        }
    }
    if gates.ffn != Gate::Closed {
        let h = tape.layernorm(z, pv.get(bp.ln2_gain), pv.get(bp.ln2_bias))?;
        let u = tape.matmul(h, pv.get(bp.ffn_w1))?;
        let u = tape.add_row(u, pv.get(bp.ffn_b1))?;
        let u = tape.gelu(u);
        let u = tape.matmul(u, pv.get(bp.ffn_w2))?;
        let u = tape.add_row(u, pv.get(bp.ffn_b2))?;
        z = gated_residual(tape, z, u, gates.alive, gates.ffn)?;
    }
    tape.set_label(z, format!("blocks.{block}.output"));
    Ok(z)
}

/// Logits from the class-token row: `Z_L[0] · W_cls`, shape `[1, C]`.
pub fn classify<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    pv: &ParamVars,
    z: Var,
) -> Result<Var> {
    let cls = tape.select_rows(z, &[0])?;
    let logits = tape.matmul(cls, pv.get(model.layout.classifier))?;
    tape.set_label(logits, "logits");
    Ok(logits)
}

/// Decision-network logits for block `block`: patch logits from each patch
/// row, head and sublayer logits from the class-token row.
pub fn decision_logits<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    pv: &ParamVars,
    block: usize,
    z: Var,
) -> Result<DecisionLogits> {
    let dp = model.layout.decisions[block].as_ref().ok_or_else(|| {
        Error::Format(format!("block {block} has no decision network"))
    })?;
    let n = model.config.num_patches();
    let rows: Vec<usize> = (1..=n).collect();
    let patch_rows = tape.select_rows(z, &rows)?;
    let cls = tape.select_rows(z, &[0])?;
    let p = tape.matmul(patch_rows, pv.get(dp.patch_w))?;
    let patches = tape.add_row(p, pv.get(dp.patch_b))?;
    let h = tape.matmul(cls, pv.get(dp.head_w))?;
    let heads = tape.add_row(h, pv.get(dp.head_b))?;
    let b = tape.matmul(cls, pv.get(dp.block_w))?;
    let block_logits = tape.add_row(b, pv.get(dp.block_b))?;
    Ok(DecisionLogits {
        patches,
        heads,
        block: block_logits,
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Keep-probabilities for block `block` from its input tokens.
pub fn decision_forward<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    pv: &ParamVars,
    block: usize,
    z: Var,
) -> Result<GateProbabilities> {
    let logits = decision_logits(tape, model, pv, block, z)?;
    Ok(probabilities(tape, &logits))
}

fn probabilities<T: Real>(tape: &Tape<T>, logits: &DecisionLogits) -> GateProbabilities {
    let probs = |v: Var| -> Vec<f64> {
        tape.value(v).data().iter().map(|x| sigmoid(x.f64())).collect()
    };
    let b = probs(logits.block);
    GateProbabilities {
        patches: probs(logits.patches),
        heads: probs(logits.heads),
        block: [b[0], b[1]],
    }
}

/// Gate state threaded from block to block.
struct Alive {
    /// Hard cumulative mask over patches.
    bits: Vec<bool>,
    /// Cumulative forward and relaxed patch gates on the tape (`[N, 1]`).
    forward: Option<Var>,
    relaxed: Option<Var>,
}

fn with_class_row<T: Real>(tape: &mut Tape<T>, patches: Var) -> Result<Var> {
    let one = tape.constant(Tensor::ones(&[1, 1]));
    Ok(tape.concat(&[one, patches], 0)?)
}

fn bits_tensor<T: Real>(bits: &[bool], shape: &[usize]) -> Tensor<T> {
    let data = bits
        .iter()
        .map(|&b| if b { T::one() } else { T::zero() })
        .collect();
    Tensor::new(shape, data).expect("bit count matches shape")
}

/// Applies patch selection for a block with constant hard gates and returns
/// the block's gates.
fn hard_block<T: Real>(
    tape: &mut Tape<T>,
    z: &mut Var,
    alive: &mut Alive,
    bp: &BlockPolicy,
    head_mode: HeadSelectionMode,
) -> Result<BlockGates> {
    for (a, &keep) in alive.bits.iter_mut().zip(&bp.patches) {
        *a = *a && keep;
    }
    let n = alive.bits.len();
    let mask = tape.constant(bits_tensor(&alive.bits, &[n, 1]));
    let weights = with_class_row(tape, mask)?;
    *z = tape.scale_rows(*z, weights)?;
    Ok(BlockGates {
        alive: Some(weights),
        heads: bp.heads.iter().map(|&b| Gate::from_bit(b)).collect(),
        msa: Gate::from_bit(bp.msa),
        ffn: Gate::from_bit(bp.ffn),
        head_mode,
    })
}

/// Relaxed gate `σ((a + Δg)/τ)` for every logit, plus its hard/straight-through
/// forward value.
fn sample_on_tape<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    tau: f64,
    straight_through: bool,
    noise: &mut GumbelNoise,
) -> Result<(Var, Var)> {
    let shape = tape.shape(logits).to_vec();
    let diffs = draw_noise_diffs(tape.value(logits).numel(), noise);
    let d = tape.constant(Tensor::from_f64(&shape, &diffs)?);
    let perturbed = tape.add(logits, d)?;
    let scaled = tape.scale(perturbed, 1.0 / tau);
    let relaxed = tape.sigmoid(scaled);
    let forward = if straight_through {
        let hard = tape
            .value(relaxed)
            .data()
            .iter()
            .map(|&r| if r >= T::of(0.5) { T::one() } else { T::zero() })
            .collect();
        tape.straight_through(relaxed, Tensor::new(&shape, hard)?)?
    } else {
        relaxed
    };
    Ok((relaxed, forward))
}

fn values<T: Real>(tape: &Tape<T>, v: Var) -> Vec<f64> {
    tape.value(v).data().iter().map(|x| x.f64()).collect()
}

/// Full forward pass: embedding, gated blocks, classifier.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    pv: &ParamVars,
    image: &[T],
    source: &mut GateSource<'_>,
    head_mode: HeadSelectionMode,
) -> Result<ForwardPass> {
    let config = &model.config;
    let (n, h) = (config.num_patches(), config.num_heads);
    if let GateSource::Fixed(policy) = source {
        policy.validate(config)?;
    }
    if let GateSource::Train { tau, .. } = source {
        if !(*tau > 0.0) {
            return Err(crate::policy::PolicyError::Temperature(*tau).into());
        }
    }
    let mut z = patchify_embed(tape, model, pv, image)?;
    let mut alive = Alive {
        bits: vec![true; n],
        forward: None,
        relaxed: None,
    };
    let mut traces = Vec::with_capacity(config.num_blocks);
    let mut policy_blocks = Vec::with_capacity(config.num_blocks);
    let mut hard_policy = true;

    for l in 0..config.num_blocks {
        let mut trace = BlockTrace::default();
        let gates = match source {
            GateSource::Vanilla => BlockGates::open(h),
            GateSource::Fixed(policy) => {
                let bp = &policy.blocks[l];
                let gates = hard_block(tape, &mut z, &mut alive, bp, head_mode)?;
                policy_blocks.push(BlockPolicy {
                    patches: alive.bits.clone(),
                    ..bp.clone()
                });
                gates
            }
            GateSource::Eval | GateSource::Train { .. } if !config.has_decision(l) => {
                let bp = BlockPolicy {
                    patches: alive.bits.clone(),
                    ..BlockPolicy::open(config)
                };
                policy_blocks.push(bp);
                BlockGates {
                    head_mode,
                    ..BlockGates::open(h)
                }
            }
            GateSource::Eval => {
                let logits = decision_logits(tape, model, pv, l, z)?;
                let probs = probabilities(tape, &logits);
                let bit = |p: f64| p >= 0.5;
                let bp = BlockPolicy {
                    patches: probs.patches.iter().map(|&p| bit(p)).collect(),
                    heads: probs.heads.iter().map(|&p| bit(p)).collect(),
                    msa: bit(probs.block[0]),
                    ffn: bit(probs.block[1]),
                };
                let gates = hard_block(tape, &mut z, &mut alive, &bp, head_mode)?;
                let to_f = |b: &[bool]| -> Vec<f64> {
                    b.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect()
                };
                let block_vals = [f64::from(u8::from(bp.msa)), f64::from(u8::from(bp.ffn))];
                trace.decisions = Some(GateDecisions {
                    patches: to_f(&bp.patches),
                    heads: to_f(&bp.heads),
                    block: block_vals,
                    relaxed_patches: to_f(&bp.patches),
                    relaxed_heads: to_f(&bp.heads),
                    relaxed_block: block_vals,
                    alive: alive.bits.clone(),
                });
                trace.probabilities = Some(probs);
                policy_blocks.push(BlockPolicy {
                    patches: alive.bits.clone(),
                    ..bp
                });
                gates
            }
            GateSource::Train {
                tau,
                straight_through,
                detach_input,
                noise,
            } => {
                let input = if *detach_input {
                    let v = tape.value(z).clone();
                    tape.constant(v)
                } else {
                    z
                };
                let logits = decision_logits(tape, model, pv, l, input)?;
                trace.probabilities = Some(probabilities(tape, &logits));
                let (rp, fp) = sample_on_tape(tape, logits.patches, *tau, *straight_through, noise)?;
                let (rh, fh) = sample_on_tape(tape, logits.heads, *tau, *straight_through, noise)?;
                let (rb, fb) = sample_on_tape(tape, logits.block, *tau, *straight_through, noise)?;

                let cum_f = match alive.forward {
                    Some(prev) => tape.mul(prev, fp)?,
                    None => fp,
                };
                let cum_r = match alive.relaxed {
                    Some(prev) => tape.mul(prev, rp)?,
                    None => rp,
                };
                alive.forward = Some(cum_f);
                alive.relaxed = Some(cum_r);
                let gate_vals = values(tape, fp);
                for (a, &g) in alive.bits.iter_mut().zip(&gate_vals) {
                    *a = *a && g >= 0.5;
                }

                let row_gates = with_class_row(tape, fp)?;
                z = tape.scale_rows(z, row_gates)?;
                let weights = with_class_row(tape, cum_f)?;
                let heads = (0..h)
                    .map(|i| tape.slice_cols(fh, i, 1).map(Gate::On))
                    .collect::<Result<Vec<_>, _>>()?;
                let msa_g = tape.slice_cols(fb, 0, 1)?;
                let ffn_g = tape.slice_cols(fb, 1, 1)?;

                let (vh, vb) = (values(tape, fh), values(tape, fb));
                let (vrh, vrb) = (values(tape, rh), values(tape, rb));
                match BlockPolicy::from_values(l, &gate_vals, &vh, [vb[0], vb[1]]) {
                    Ok(bp) => policy_blocks.push(BlockPolicy {
                        patches: alive.bits.clone(),
                        ..bp
                    }),
                    Err(_) => hard_policy = false,
                }
                trace.decisions = Some(GateDecisions {
                    patches: gate_vals,
                    heads: vh,
                    block: [vb[0], vb[1]],
                    relaxed_patches: values(tape, rp),
                    relaxed_heads: vrh,
                    relaxed_block: [vrb[0], vrb[1]],
                    alive: alive.bits.clone(),
                });
                trace.usage = Some(UsageVars {
                    patches: cum_f,
                    heads: fh,
                    block: fb,
                    relaxed_patches: cum_r,
                    relaxed_heads: rh,
                    relaxed_block: rb,
                });
                BlockGates {
                    alive: Some(weights),
                    heads,
                    msa: Gate::On(msa_g),
                    ffn: Gate::On(ffn_g),
                    head_mode,
                }
            }
        };
        z = block_forward(tape, model, pv, l, z, &gates)?;
        traces.push(trace);
    }
    let logits = classify(tape, model, pv, z)?;
    let policy = match source {
        GateSource::Vanilla => Some(Policy::open(config)),
        _ if hard_policy => Some(Policy {
            blocks: policy_blocks,
        }),
        _ => None,
    };
    Ok(ForwardPass {
        logits,
        blocks: traces,
        policy,
    })
}

/// Convenience: hard-gated inference on one image, returning logits and the
/// realized policy.
pub fn infer<T: Real>(
    model: &Model<T>,
    image: &[T],
    source: &mut GateSource<'_>,
    head_mode: HeadSelectionMode,
) -> Result<(Vec<f64>, Policy)> {
    let mut tape = Tape::new();
    let pv = model.leaf_params(&mut tape, Trainable::None);
    let pass = forward(&mut tape, model, &pv, image, source, head_mode)?;
    let logits = values(&tape, pass.logits);
    let policy = pass
        .policy
        .ok_or_else(|| Error::Format("inference produced relaxed gates".into()))?;
    Ok((logits, policy))
}
