//! Polarity decoder: self-attention over the encoder states, cross-attention
//! to the aspect-head states and then to the opinion-head states, a
//! feed-forward sublayer, and a four-way polarity classifier per token.

use rand::Rng;

use crate::autodiff::{Bound, Graph, ParamStore, Var};
use crate::encoder::{EncoderOutput, ModelConfig};
use crate::error::{Error, Result};
use crate::heads::{token_nll, ExtractionHeadParams};
use crate::layers::{residual_norm, AttentionParams, FfnParams, ForwardCtx, LayerNormParams, Linear};

#[derive(Clone, Copy, Debug)]
pub struct DecoderBlockParams {
    pub self_attention: AttentionParams,
    pub self_norm: LayerNormParams,
    pub aspect_attention: AttentionParams,
    pub aspect_norm: LayerNormParams,
    pub opinion_attention: AttentionParams,
    pub opinion_norm: LayerNormParams,
    pub ffn: FfnParams,
    pub ffn_norm: LayerNormParams,
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub blocks: Vec<DecoderBlockParams>,
    /// `[4 x d_h]` classifier over `POS, NEU, NEG, O`.
    pub polarity: Linear,
}

impl DecoderParams {
    pub fn init<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_h;
        let blocks = (0..cfg.n_dec_layers)
            .map(|i| {
                let name = format!("decoder.block{i}");
                let attn = |store: &mut ParamStore, rng: &mut R, part: &str| {
                    AttentionParams::init(store, &format!("{name}.{part}"), d, rng)
                };
                let norm = |store: &mut ParamStore, part: &str| LayerNormParams::init(store, &format!("{name}.{part}"), d);
                DecoderBlockParams {
                    self_attention: attn(store, rng, "self_attention"),
                    self_norm: norm(store, "self_norm"),
                    aspect_attention: attn(store, rng, "aspect_attention"),
                    aspect_norm: norm(store, "aspect_norm"),
                    opinion_attention: attn(store, rng, "opinion_attention"),
                    opinion_norm: norm(store, "opinion_norm"),
                    ffn: FfnParams::init(store, &format!("{name}.ffn"), d, cfg.ffn_dim, rng),
                    ffn_norm: norm(store, "ffn_norm"),
                }
            })
            .collect();
        Self {
            blocks,
            polarity: Linear::init(store, "decoder.polarity", d, 4, rng),
        }
    }
}

/// Which cross-attention sublayers run. A disabled sublayer passes its
/// input through unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PropagationFlags {
    pub enable_ap: bool,
    pub enable_op: bool,
}

impl Default for PropagationFlags {
    fn default() -> Self {
        Self {
            enable_ap: true,
            enable_op: true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderTrace {
    /// First-block output of the self-attention sublayer.
    pub u_h: Var,
    /// First-block output of the aspect cross-attention sublayer.
    pub u_a: Var,
    /// First-block output of the opinion cross-attention sublayer.
    pub u_o: Var,
    /// Last-block output, one row per encoder row.
    pub output: Var,
    /// Raw attention nodes of the first block's cross-attention sublayers.
    pub aspect_attention: Option<Var>,
    pub opinion_attention: Option<Var>,
}

#[allow(clippy::too_many_arguments)]
pub fn propagate(
    g: &mut Graph,
    p: &Bound,
    enc: &EncoderOutput,
    z_aspect: Var,
    z_opinion: Var,
    params: &DecoderParams,
    cfg: &ModelConfig,
    flags: PropagationFlags,
    ctx: &mut ForwardCtx,
) -> Result<DecoderTrace> {
    for (what, z) in [("aspect", z_aspect), ("opinion", z_opinion)] {
        let shape = g.value(z).shape();
        if shape != [enc.rows(), cfg.d_h] {
            return Err(Error::contract(format!(
                "{what} states have shape {shape:?}, expected [{}, {}]",
                enc.rows(),
                cfg.d_h
            )));
        }
    }
    if params.blocks.is_empty() {
        return Err(Error::contract("decoder has no blocks"));
    }
    let self_mask = enc.attention_mask();
    let key_mask = enc.token_mask();
    let layout = enc.self_layout(cfg.n_heads);

    let mut x = enc.h;
    let mut trace: Option<DecoderTrace> = None;
    for block in &params.blocks {
        let (s, _) = block.self_attention.forward(g, p, x, x, layout, &self_mask)?;
        let u_h = residual_norm(g, p, &block.self_norm, x, s, cfg.ln_eps, ctx)?;

        let (u_a, a_attn) = if flags.enable_ap {
            let (a, attn) = block.aspect_attention.forward(g, p, u_h, z_aspect, layout, &key_mask)?;
            (residual_norm(g, p, &block.aspect_norm, u_h, a, cfg.ln_eps, ctx)?, Some(attn))
        } else {
            (u_h, None)
        };

        let (u_o, o_attn) = if flags.enable_op {
            let (o, attn) = block.opinion_attention.forward(g, p, u_a, z_opinion, layout, &key_mask)?;
            (residual_norm(g, p, &block.opinion_norm, u_a, o, cfg.ln_eps, ctx)?, Some(attn))
        } else {
            (u_a, None)
        };

        let f = block.ffn.forward(g, p, u_o)?;
        x = residual_norm(g, p, &block.ffn_norm, u_o, f, cfg.ln_eps, ctx)?;
        if trace.is_none() {
            trace = Some(DecoderTrace {
                u_h,
                u_a,
                u_o,
                output: x,
                aspect_attention: a_attn,
                opinion_attention: o_attn,
            });
        }
    }
    let mut trace = trace.expect("at least one block");
    trace.output = x;
    Ok(trace)
}

/// Per-row distributions over `POS, NEU, NEG, O`.
pub fn polarity_forward(g: &mut Graph, p: &Bound, trace: &DecoderTrace, params: &DecoderParams) -> Result<Var> {
    let logits = params.polarity.forward(g, p, trace.output)?;
    g.softmax(logits, None)
}

/// Mean NLL of gold polarity class indices over token rows.
pub fn asc_loss(g: &mut Graph, probs: Var, enc: &EncoderOutput, gold: &[Vec<usize>]) -> Result<Var> {
    token_nll(g, probs, enc, gold)
}

/// Polarity classifier used when both propagation steps are disabled: an
/// extraction-style head reading the encoder states directly.
pub fn init_ablation_head<R: Rng>(store: &mut ParamStore, d_h: usize, rng: &mut R) -> ExtractionHeadParams {
    ExtractionHeadParams::init(store, "ablation_polarity_head", d_h, 4, rng)
}

pub fn ablation_polarity_head(
    g: &mut Graph,
    p: &Bound,
    enc: &EncoderOutput,
    head: &ExtractionHeadParams,
) -> Result<Var> {
    Ok(crate::heads::extraction_forward(g, p, enc, head)?.probs)
}
