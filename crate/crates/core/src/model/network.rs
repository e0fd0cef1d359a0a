//! Trunk and prediction-head graphs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PatchSequence;
use crate::model::config::{HeadKind, ModelConfig};
use crate::model::lora::LoraConfig;
use crate::model::params::{init_tensor, Bound, ParamStore};
use crate::model::posembed::slot_pos_embed;
use crate::model::ModelError;
use crate::numerics::{AttentionPlan, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Configuration plus parameters of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub lora: Option<LoraConfig>,
}

/// Serializable description of a [`ModelState`] without its tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub config: ModelConfig,
    pub lora: Option<LoraConfig>,
}

/// Allocates and initializes every parameter in layout order from one seeded
/// stream.
pub fn init_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelState<T>, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    for spec in cfg.layout() {
        let value = init_tensor(&spec.shape, spec.kind, &mut rng);
        params.insert(spec.name, value, spec.kind)?;
    }
    Ok(ModelState {
        config: cfg.clone(),
        params,
        lora: None,
    })
}

impl<T: Scalar> ModelState<T> {
    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Fingerprint of the base (non-adapter) parameters.
    pub fn trunk_fingerprint(&self) -> u64 {
        let mut base = ParamStore::new();
        for p in self.params.iter().filter(|p| !p.name.contains(".lora_")) {
            base.insert(p.name.clone(), p.value.clone(), p.kind)
                .expect("unique names");
        }
        base.fingerprint()
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            config: self.config.clone(),
            lora: self.lora.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            params: self.params.cast(),
            lora: self.lora.clone(),
        }
    }
}

/// Variables produced by [`trunk_graph`].
#[derive(Clone, Debug)]
pub struct TrunkGraph {
    /// Final-norm output of the last block, `[B, K, d]`.
    pub features: Var,
    /// `(layer, features)` for each requested layer, 1-based, each passed
    /// through the final norm.
    pub layers: Vec<(usize, Var)>,
}

/// Checks that `plans` has one shared plan or one per batch element, each
/// over `k` slots.
pub fn check_plans(plans: &[AttentionPlan], batch: usize, k: usize) -> Result<(), ModelError> {
    if plans.is_empty() || (plans.len() != 1 && plans.len() != batch) {
        return Err(ModelError::PlanMismatch(format!(
            "{} plans for a batch of {batch}",
            plans.len()
        )));
    }
    if let Some(p) = plans.iter().find(|p| p.len() != k) {
        return Err(ModelError::PlanMismatch(format!(
            "plan over {} slots, sequence has {k}",
            p.len()
        )));
    }
    Ok(())
}

fn linear<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    name: &str,
    x: Var,
    lora_scale: Option<T>,
) -> Result<Var, ModelError> {
    let y = tape.matmul(x, bound.var(name)?)?;
    let a_name = format!("{name}.lora_a");
    match lora_scale {
        Some(scale) if bound.has(&a_name) => {
            let a_t = tape.transpose(bound.var(&a_name)?)?;
            let b_t = tape.transpose(bound.var(&format!("{name}.lora_b"))?)?;
            let low = tape.matmul(x, a_t)?;
            let delta = tape.matmul(low, b_t)?;
            let delta = tape.scale(delta, scale)?;
            Ok(tape.add(y, delta)?)
        }
        _ => Ok(y),
    }
}

struct BlockCtx<'a, T> {
    bound: &'a Bound,
    plans: &'a [AttentionPlan],
    heads: usize,
    lora_scale: Option<T>,
}

fn attention<T: Scalar>(tape: &mut Tape<T>, ctx: &BlockCtx<'_, T>, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let d = *tape.shape(x).last().expect("rank 3");
    let dh = d / ctx.heads;
    let q = linear(tape, ctx.bound, &format!("{prefix}.attn.q"), x, ctx.lora_scale)?;
    let k = linear(tape, ctx.bound, &format!("{prefix}.attn.k"), x, ctx.lora_scale)?;
    let v = linear(tape, ctx.bound, &format!("{prefix}.attn.v"), x, ctx.lora_scale)?;
    let inv_sqrt = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut outs = Vec::with_capacity(ctx.heads);
    for h in 0..ctx.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice(q, 2, lo, hi)?;
        let kh = tape.slice(k, 2, lo, hi)?;
        let vh = tape.slice(v, 2, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, inv_sqrt)?;
        let weights = tape.masked_softmax(scores, ctx.plans)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    let merged = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat(&outs, 2)?
    };
    linear(tape, ctx.bound, &format!("{prefix}.attn.o"), merged, ctx.lora_scale)
}

fn block<T: Scalar>(tape: &mut Tape<T>, ctx: &BlockCtx<'_, T>, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let h = tape.layer_norm(x, ctx.bound.var(&format!("{prefix}.norm1.scale"))?)?;
    let a = attention(tape, ctx, prefix, h)?;
    let x = tape.add(x, a)?;
    let h = tape.layer_norm(x, ctx.bound.var(&format!("{prefix}.norm2.scale"))?)?;
    let h = tape.matmul(h, ctx.bound.var(&format!("{prefix}.mlp.fc1"))?)?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, ctx.bound.var(&format!("{prefix}.mlp.fc2"))?)?;
    Ok(tape.add(x, h)?)
}

/// Slot-ordered position embeddings as a tape constant.
fn pos_constant<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    positions: &[(usize, usize)],
) -> Result<Var, ModelError> {
    let table = slot_pos_embed::<T>(cfg.grid, positions, cfg.width)?;
    Ok(tape.constant(table))
}

/// Builds the trunk over `inputs` (`[B, K, patch_dim]`).
///
/// `mask[b][k]` replaces slot `k` of image `b` with the learnable mask token
/// before positions are added. `collect` lists 1-based layers whose outputs
/// are returned in addition to the final features.
#[allow(clippy::too_many_arguments)]
pub fn trunk_graph<T: Scalar>(
    state: &ModelState<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    inputs: &Tensor<T>,
    positions: &[(usize, usize)],
    mask: Option<&[Vec<bool>]>,
    plans: &[AttentionPlan],
    collect: &[usize],
) -> Result<TrunkGraph, ModelError> {
    let cfg = &state.config;
    let s = inputs.shape();
    if s.len() != 3 || s[2] != cfg.patch_dim() {
        return Err(ModelError::PlanMismatch(format!(
            "inputs {s:?} do not match patch dimension {}",
            cfg.patch_dim()
        )));
    }
    let (batch, k) = (s[0], s[1]);
    if positions.len() != k {
        return Err(ModelError::PlanMismatch(format!(
            "{} grid positions for {k} slots",
            positions.len()
        )));
    }
    check_plans(plans, batch, k)?;
    if let Some(&l) = collect.iter().find(|&&l| l == 0 || l > cfg.depth) {
        return Err(ModelError::InvalidConfig(format!(
            "layer {l} outside 1..={}",
            cfg.depth
        )));
    }

    let mut x = match mask {
        None => {
            let inp = tape.constant(inputs.clone());
            tape.matmul(inp, bound.var("patch_embed")?)?
        }
        Some(mask) => {
            if mask.len() != batch || mask.iter().any(|m| m.len() != k) {
                return Err(ModelError::PlanMismatch("mask shape does not match the batch".into()));
            }
            let pd = cfg.patch_dim();
            let mut zeroed = inputs.clone();
            for (row, &m) in zeroed.data_mut().chunks_mut(pd).zip(mask.iter().flatten()) {
                if m {
                    row.fill(T::zero());
                }
            }
            let inp = tape.constant(zeroed);
            let x = tape.matmul(inp, bound.var("patch_embed")?)?;
            let index = mask.iter().flatten().map(|&m| m.then_some(0)).collect();
            tape.embedding_add(x, bound.var("mask_token")?, index)?
        }
    };
    let pos = pos_constant(tape, cfg, positions)?;
    x = tape.add(x, pos)?;

    let ctx = BlockCtx {
        bound,
        plans,
        heads: cfg.heads,
        lora_scale: state.lora.as_ref().map(|l| T::lit(l.scale())),
    };
    let norm = bound.var("norm.scale")?;
    let mut layers = Vec::new();
    for l in 0..cfg.depth {
        x = block(tape, &ctx, &format!("blocks.{l}"), x)?;
        if collect.contains(&(l + 1)) && l + 1 != cfg.depth {
            layers.push((l + 1, tape.layer_norm(x, norm)?));
        }
    }
    let features = tape.layer_norm(x, norm)?;
    if collect.contains(&cfg.depth) {
        layers.push((cfg.depth, features));
    }
    Ok(TrunkGraph { features, layers })
}

/// Prediction head over trunk features `[B, K, d]`; output is
/// `[B, K, output_dim]`.
pub fn head_graph<T: Scalar>(
    state: &ModelState<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    features: Var,
    positions: &[(usize, usize)],
    plans: &[AttentionPlan],
) -> Result<Var, ModelError> {
    let cfg = &state.config;
    let pos = pos_constant(tape, cfg, positions)?;
    let mut x = tape.add(features, pos)?;
    match cfg.head_kind {
        HeadKind::None => {}
        HeadKind::Mlp => {
            for n in 0..cfg.head_blocks {
                let h = tape.layer_norm(x, bound.var(&format!("head.blocks.{n}.norm.scale"))?)?;
                let h = tape.matmul(h, bound.var(&format!("head.blocks.{n}.fc1"))?)?;
                let h = tape.gelu(h)?;
                let h = tape.matmul(h, bound.var(&format!("head.blocks.{n}.fc2"))?)?;
                x = tape.add(x, h)?;
            }
            x = tape.layer_norm(x, bound.var("head.norm.scale")?)?;
        }
        HeadKind::Transformer => {
            let ctx = BlockCtx {
                bound,
                plans,
                heads: cfg.heads,
                lora_scale: None,
            };
            for n in 0..cfg.head_blocks {
                x = block(tape, &ctx, &format!("head.blocks.{n}"), x)?;
            }
            x = tape.layer_norm(x, bound.var("head.norm.scale")?)?;
        }
    }
    Ok(tape.matmul(x, bound.var("head.proj")?)?)
}

/// Trunk outputs as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct TrunkOutput<T> {
    pub features: Tensor<T>,
    pub layers: Vec<(usize, Tensor<T>)>,
}

/// Untracked trunk forward pass over `seq.inputs`.
pub fn forward_trunk<T: Scalar>(
    state: &ModelState<T>,
    seq: &PatchSequence<T>,
    plans: &[AttentionPlan],
    collect: &[usize],
) -> Result<TrunkOutput<T>, ModelError> {
    let mut tape = Tape::new();
    let bound = state.params.bind(&mut tape, false);
    let g = trunk_graph(
        state,
        &mut tape,
        &bound,
        &seq.inputs,
        &seq.grid_positions,
        None,
        plans,
        collect,
    )?;
    Ok(TrunkOutput {
        features: tape.value(g.features).clone(),
        layers: g.layers.iter().map(|&(l, v)| (l, tape.value(v).clone())).collect(),
    })
}

/// Untracked head pass over trunk features.
pub fn forward_pixel_head<T: Scalar>(
    state: &ModelState<T>,
    features: &Tensor<T>,
    positions: &[(usize, usize)],
    plans: &[AttentionPlan],
) -> Result<Tensor<T>, ModelError> {
    let mut tape = Tape::new();
    let bound = state.params.bind(&mut tape, false);
    let f = tape.constant(features.clone());
    let out = head_graph(state, &mut tape, &bound, f, positions, plans)?;
    Ok(tape.value(out).clone())
}

/// Trunk followed by head, without gradient tracking.
pub fn predict<T: Scalar>(
    state: &ModelState<T>,
    seq: &PatchSequence<T>,
    plans: &[AttentionPlan],
) -> Result<Tensor<T>, ModelError> {
    let mut tape = Tape::new();
    let bound = state.params.bind(&mut tape, false);
    let g = trunk_graph(
        state,
        &mut tape,
        &bound,
        &seq.inputs,
        &seq.grid_positions,
        None,
        plans,
        &[],
    )?;
    let out = head_graph(state, &mut tape, &bound, g.features, &seq.grid_positions, plans)?;
    Ok(tape.value(out).clone())
}
