//! Joint objective, optimizer steps, the epoch loop and checkpoints.

mod checkpoint;
mod model;
mod optim;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::decoder::PropagationFlags;
use crate::error::{Error, Result};
use crate::layers::ForwardCtx;
use crate::text::Batch;

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use model::{absa_forward, absa_losses, aux_batch_loss, AbsaForward, ModelParams};
pub use optim::{clip_global_norm, global_norm, AdamW};
pub use trainer::{train_loop, train_loop_with, EpochRecord, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the auxiliary losses in the final objective.
    pub alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub enable_ap: bool,
    pub enable_op: bool,
    pub enable_tsmtd: bool,
    pub enable_prd: bool,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Masked-term instances generated per sentence and epoch.
    pub tsmtd_per_sentence: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lr: 1e-3,
            batch_size: 16,
            epochs: 30,
            weight_decay: 0.01,
            seed: 7,
            enable_ap: true,
            enable_op: true,
            enable_tsmtd: true,
            enable_prd: true,
            clip_norm: Some(1.0),
            tsmtd_per_sentence: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::validation("alpha must be a finite value >= 0"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::validation("lr must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be at least 1"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::validation("weight_decay must be >= 0"));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::validation("clip_norm must be positive or disabled"));
            }
        }
        Ok(())
    }

    pub fn flags(&self) -> PropagationFlags {
        PropagationFlags {
            enable_ap: self.enable_ap,
            enable_op: self.enable_op,
        }
    }
}

/// Scalar value of every loss term of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ate: f64,
    pub l_ote: f64,
    pub l_asc: f64,
    pub l_tsmtd: f64,
    pub l_prd: f64,
    pub l_absa: f64,
    pub l_aux: f64,
    pub l_final: f64,
}

impl LossBreakdown {
    /// Largest violation of the three sum identities.
    pub fn identity_error(&self, alpha: f64) -> f64 {
        let absa = (self.l_absa - (self.l_ate + self.l_ote + self.l_asc)).abs();
        let aux = (self.l_aux - (self.l_tsmtd + self.l_prd)).abs();
        let fin = (self.l_final - (self.l_absa + alpha * self.l_aux)).abs();
        absa.max(aux).max(fin)
    }

    fn terms(&self) -> [(&'static str, f64); 8] {
        [
            ("l_ate", self.l_ate),
            ("l_ote", self.l_ote),
            ("l_asc", self.l_asc),
            ("l_tsmtd", self.l_tsmtd),
            ("l_prd", self.l_prd),
            ("l_absa", self.l_absa),
            ("l_aux", self.l_aux),
            ("l_final", self.l_final),
        ]
    }

    /// Error naming the first non-finite term, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.terms().iter().find(|(_, v)| !v.is_finite()) {
            Some((name, v)) => Err(Error::NonFinite(format!("{name} = {v}"))),
            None => Ok(()),
        }
    }

    /// Element-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown {
            l_ate: avg(|b| b.l_ate),
            l_ote: avg(|b| b.l_ote),
            l_asc: avg(|b| b.l_asc),
            l_tsmtd: avg(|b| b.l_tsmtd),
            l_prd: avg(|b| b.l_prd),
            l_absa: avg(|b| b.l_absa),
            l_aux: avg(|b| b.l_aux),
            l_final: avg(|b| b.l_final),
        }
    }
}

/// Inputs of one optimizer step. Auxiliary batches may be absent, in which
/// case their losses are zero.
#[derive(Clone, Debug)]
pub struct StepBatches {
    pub absa: Batch,
    pub tsmtd: Option<Batch>,
    pub prd: Option<Batch>,
}

/// Graph nodes of the joint objective.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub ate: Var,
    pub ote: Var,
    pub asc: Var,
    pub tsmtd: Var,
    pub prd: Var,
    pub absa: Var,
    pub aux: Var,
    pub fin: Var,
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Var| g.value(x).data()[0];
        LossBreakdown {
            l_ate: v(self.ate),
            l_ote: v(self.ote),
            l_asc: v(self.asc),
            l_tsmtd: v(self.tsmtd),
            l_prd: v(self.prd),
            l_absa: v(self.absa),
            l_aux: v(self.aux),
            l_final: v(self.fin),
        }
    }
}

/// Builds the joint objective on `g`: the three main-task losses plus the
/// `alpha`-weighted auxiliary losses of the enabled auxiliary tasks.
pub fn joint_loss(
    g: &mut Graph,
    p: &crate::autodiff::Bound,
    model: &ModelParams,
    batches: &StepBatches,
    cfg: &TrainConfig,
    ctx: &mut ForwardCtx,
) -> Result<LossNodes> {
    let fwd = absa_forward(g, p, model, &batches.absa, cfg.flags(), ctx)?;
    let (ate, ote, asc) = absa_losses(g, &fwd, &batches.absa)?;
    let mut aux_term = |g: &mut Graph, enabled: bool, batch: &Option<Batch>| -> Result<Var> {
        match batch {
            Some(b) if enabled && b.size() > 0 => aux_batch_loss(g, p, model, b, ctx),
            _ => Ok(g.constant(Tensor::scalar(0.0))),
        }
    };
    let tsmtd = aux_term(g, cfg.enable_tsmtd, &batches.tsmtd)?;
    let prd = aux_term(g, cfg.enable_prd, &batches.prd)?;
    let extraction = g.add(ate, ote)?;
    let absa = g.add(extraction, asc)?;
    let aux = g.add(tsmtd, prd)?;
    let weighted = g.scale(aux, cfg.alpha);
    let fin = g.add(absa, weighted)?;
    Ok(LossNodes {
        ate,
        ote,
        asc,
        tsmtd,
        prd,
        absa,
        aux,
        fin,
    })
}

/// Loss breakdown and the gradient of the final objective for every
/// parameter, in store order.
pub fn compute_loss_and_grads(
    model: &ModelParams,
    batches: &StepBatches,
    cfg: &TrainConfig,
    ctx: &mut ForwardCtx,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let nodes = joint_loss(&mut g, &p, model, batches, cfg, ctx)?;
    let losses = nodes.breakdown(&g);
    losses.check_finite()?;
    let grads = g.backward(nodes.fin)?;
    Ok((losses, p.collect_grads(&g, &grads)))
}

/// One optimizer update on the joint objective.
pub fn step(
    model: &mut ModelParams,
    opt: &mut AdamW,
    batches: &StepBatches,
    cfg: &TrainConfig,
    ctx: &mut ForwardCtx,
) -> Result<LossBreakdown> {
    let (losses, mut grads) = compute_loss_and_grads(model, batches, cfg, ctx)?;
    if let Some(max) = cfg.clip_norm {
        let norm = clip_global_norm(&mut grads, max);
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm = {norm}")));
        }
    }
    opt.update(&mut model.store, &grads, cfg.lr, cfg.weight_decay)?;
    Ok(losses)
}
