//! Parameter groups and forward helpers shared by the encoder and decoder.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AttnLayout, Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward-pass state: mode and the dropout stream.
pub struct ForwardCtx {
    mode: Mode,
    dropout: f64,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        Self {
            mode: Mode::Train,
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Inverted dropout in train mode; identity otherwise.
    pub fn dropout(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.mode == Mode::Eval || self.dropout <= 0.0 {
            return Ok(x);
        }
        let keep_prob = 1.0 - self.dropout;
        let scale = 1.0 / keep_prob;
        let keep = (0..g.value(x).len())
            .map(|_| if self.rng.gen_bool(keep_prob) { scale } else { 0.0 })
            .collect();
        g.dropout(x, keep)
    }
}

/// Affine map `x * w^T + b`, `w` stored as `[out x in]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            w: store.add_weight(&format!("{name}.weight"), d_out, d_in, rng),
            b: store.add_bias(&format!("{name}.bias"), d_out),
        }
    }

    /// All-zero map. Used for the last projection of every residual
    /// branch, so each sublayer starts as the identity before its norm.
    pub fn init_zero(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            w: store.add(format!("{name}.weight"), Tensor::zeros(d_out, d_in), true),
            b: store.add_bias(&format!("{name}.bias"), d_out),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.w), p.var(self.b))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn init(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add_ln_gain(&format!("{name}.gain"), d),
            bias: store.add_bias(&format!("{name}.bias"), d),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, eps: f64) -> Result<Var> {
        g.layer_norm(x, p.var(self.gain), p.var(self.bias), eps)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl AttentionParams {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::init(store, &format!("{name}.query"), d, d, rng),
            key: Linear::init(store, &format!("{name}.key"), d, d, rng),
            value: Linear::init(store, &format!("{name}.value"), d, d, rng),
            output: Linear::init_zero(store, &format!("{name}.output"), d, d),
        }
    }

    /// Multi-head attention of `queries` over `keys_values`. Returns the
    /// projected output and the raw attention node (for its weights).
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        queries: Var,
        keys_values: Var,
        layout: AttnLayout,
        key_mask: &[bool],
    ) -> Result<(Var, Var)> {
        let q = self.query.forward(g, p, queries)?;
        let k = self.key.forward(g, p, keys_values)?;
        let v = self.value.forward(g, p, keys_values)?;
        let attn = g.attention(q, k, v, layout, key_mask)?;
        Ok((self.output.forward(g, p, attn)?, attn))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub up: Linear,
    pub down: Linear,
}

impl FfnParams {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::init(store, &format!("{name}.up"), d, hidden, rng),
            down: Linear::init_zero(store, &format!("{name}.down"), hidden, d),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let h = g.gelu(h);
        self.down.forward(g, p, h)
    }
}

/// `LN(x + dropout(sublayer))`.
pub fn residual_norm(
    g: &mut Graph,
    p: &Bound,
    ln: &LayerNormParams,
    x: Var,
    sublayer: Var,
    eps: f64,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let s = ctx.dropout(g, sublayer)?;
    let sum = g.add(x, s)?;
    ln.forward(g, p, sum, eps)
}
