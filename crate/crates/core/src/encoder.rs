//! Task-shared transformer encoder.
//!
//! Produces one `d_h`-wide row per input position (`[CLS]`, the tokens,
//! `[SEP]`, then padding) for every instance of a batch. Rows are laid out
//! instance-major: row `b * width + t` is position `t` of instance `b`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnLayout, Bound, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::layers::{residual_norm, AttentionParams, FfnParams, ForwardCtx, LayerNormParams};
use crate::text::Batch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_h: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_h: 64,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 2,
            ffn_dim: 128,
            max_len: 64,
            dropout: 0.1,
            vocab_size: 0,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// BERT-base sized setting: 768-wide states, two decoder layers and two
    /// heads. Impractically slow on this engine.
    pub fn base_scale(vocab_size: usize) -> Self {
        Self {
            d_h: 768,
            n_enc_layers: 12,
            n_dec_layers: 2,
            n_heads: 2,
            ffn_dim: 3072,
            max_len: 128,
            dropout: 0.1,
            vocab_size,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_h", self.d_h),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::validation(format!("{name} must be at least 1")));
        }
        if self.d_h % self.n_heads != 0 {
            return Err(Error::validation("d_h must be divisible by n_heads"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation("dropout must lie in [0, 1)"));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::validation("ln_eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerParams {
    pub attention: AttentionParams,
    pub attn_norm: LayerNormParams,
    pub ffn: FfnParams,
    pub ffn_norm: LayerNormParams,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<EncoderLayerParams>,
}

impl EncoderParams {
    pub fn init<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_h;
        let token_embedding = store.add_weight("encoder.token_embedding", cfg.vocab_size, d, rng);
        let position_embedding = store.add_weight("encoder.position_embedding", cfg.max_len, d, rng);
        let layers = (0..cfg.n_enc_layers)
            .map(|i| {
                let name = format!("encoder.layer{i}");
                EncoderLayerParams {
                    attention: AttentionParams::init(store, &format!("{name}.attention"), d, rng),
                    attn_norm: LayerNormParams::init(store, &format!("{name}.attn_norm"), d),
                    ffn: FfnParams::init(store, &format!("{name}.ffn"), d, cfg.ffn_dim, rng),
                    ffn_norm: LayerNormParams::init(store, &format!("{name}.ffn_norm"), d),
                }
            })
            .collect();
        Self {
            token_embedding,
            position_embedding,
            layers,
        }
    }
}

/// Encoder states for a padded batch.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[batch * width x d_h]`.
    pub h: Var,
    pub batch: usize,
    pub width: usize,
    /// Real length of each instance, `[CLS]` and `[SEP]` included.
    pub lengths: Vec<usize>,
    pub token_counts: Vec<usize>,
}

impl EncoderOutput {
    pub fn rows(&self) -> usize {
        self.batch * self.width
    }

    /// True on every non-padding row.
    pub fn attention_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.rows());
        for &len in &self.lengths {
            m.extend((0..self.width).map(|t| t < len));
        }
        m
    }

    /// True on token rows `1..=n` only (not `[CLS]`, `[SEP]` or padding).
    pub fn token_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.rows());
        for &n in &self.token_counts {
            m.extend((0..self.width).map(|t| t >= 1 && t <= n));
        }
        m
    }

    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.batch).map(|b| b * self.width).collect()
    }

    /// Row indices of the tokens of instance `b`.
    pub fn token_rows(&self, b: usize) -> std::ops::Range<usize> {
        let start = b * self.width + 1;
        start..start + self.token_counts[b]
    }

    pub fn self_layout(&self, heads: usize) -> AttnLayout {
        AttnLayout {
            batch: self.batch,
            q_len: self.width,
            k_len: self.width,
            heads,
        }
    }

    /// `[batch x d_h]` rows of the `[CLS]` position.
    pub fn h_cls(&self, g: &mut Graph) -> Result<Var> {
        g.select_rows(self.h, &self.cls_rows())
    }
}

pub fn encode(
    g: &mut Graph,
    p: &Bound,
    params: &EncoderParams,
    cfg: &ModelConfig,
    batch: &Batch,
    ctx: &mut ForwardCtx,
) -> Result<EncoderOutput> {
    if batch.width > cfg.max_len {
        return Err(Error::contract(format!(
            "sequence length {} exceeds max_len {}",
            batch.width, cfg.max_len
        )));
    }
    if let Some(&bad) = batch.ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::contract(format!(
            "token id {bad} outside vocabulary of size {}",
            cfg.vocab_size
        )));
    }
    let tok = g.embedding(p.var(params.token_embedding), &batch.ids)?;
    let mut out = EncoderOutput {
        h: tok,
        batch: batch.size(),
        width: batch.width,
        lengths: batch.lengths(),
        token_counts: batch.token_counts.clone(),
    };
    let positions: Vec<usize> = (0..out.batch).flat_map(|_| 0..out.width).collect();
    let pos = g.embedding(p.var(params.position_embedding), &positions)?;
    let x = g.add(tok, pos)?;
    let mut x = ctx.dropout(g, x)?;

    let mask = out.attention_mask();
    let layout = out.self_layout(cfg.n_heads);
    for layer in &params.layers {
        let (a, _) = layer.attention.forward(g, p, x, x, layout, &mask)?;
        x = residual_norm(g, p, &layer.attn_norm, x, a, cfg.ln_eps, ctx)?;
        let f = layer.ffn.forward(g, p, x)?;
        x = residual_norm(g, p, &layer.ffn_norm, x, f, cfg.ln_eps, ctx)?;
    }
    out.h = x;
    Ok(out)
}
