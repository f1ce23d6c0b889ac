//! The full parameter set and the forward passes that every task shares.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bound, Graph, ParamStore, Var};
use crate::decoder::{
    ablation_polarity_head, asc_loss, init_ablation_head, polarity_forward, propagate, DecoderParams, DecoderTrace,
    PropagationFlags,
};
use crate::encoder::{encode, EncoderOutput, EncoderParams, ModelConfig};
use crate::error::{Error, Result};
use crate::heads::{
    aux_forward, aux_loss, extraction_forward, extraction_loss, AuxHeadParams, AuxKind, AuxTarget,
    ExtractionHeadParams, ExtractionTrace,
};
use crate::layers::ForwardCtx;
use crate::text::{Batch, InstanceKind};

/// Every trainable tensor of the model. The encoder is a single instance
/// shared by the extraction, polarity and auxiliary passes.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub ate_head: ExtractionHeadParams,
    pub ote_head: ExtractionHeadParams,
    pub decoder: DecoderParams,
    /// Polarity head used when both propagation steps are disabled.
    pub ablation_head: ExtractionHeadParams,
    pub aux: AuxHeadParams,
}

impl ModelParams {
    /// Seeded initialization in canonical registration order.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_h;
        let encoder = EncoderParams::init(&mut store, config, &mut rng);
        let ate_head = ExtractionHeadParams::init(&mut store, "ate_head", d, 3, &mut rng);
        let ote_head = ExtractionHeadParams::init(&mut store, "ote_head", d, 3, &mut rng);
        let decoder = DecoderParams::init(&mut store, config, &mut rng);
        let ablation_head = init_ablation_head(&mut store, d, &mut rng);
        let aux = AuxHeadParams::init(&mut store, d, &mut rng);
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            ate_head,
            ote_head,
            decoder,
            ablation_head,
            aux,
        })
    }

    /// Model with the layout of `config` and values copied by name from
    /// `store`. Every name must be present with a matching shape.
    pub fn from_store(config: &ModelConfig, store: &ParamStore) -> Result<Self> {
        let mut model = Self::init(config, 0)?;
        if store.len() != model.store.len() {
            return Err(Error::validation(format!(
                "expected {} parameter tensors, found {}",
                model.store.len(),
                store.len()
            )));
        }
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.name(id).to_string();
            let src = store
                .find(&name)
                .ok_or_else(|| Error::validation(format!("missing parameter {name}")))?;
            model.store.set(id, store.get(src).clone())?;
        }
        Ok(model)
    }
}

/// Graph nodes of one main-task forward pass.
#[derive(Clone, Debug)]
pub struct AbsaForward {
    pub encoder: EncoderOutput,
    pub ate: ExtractionTrace,
    pub ote: ExtractionTrace,
    /// `None` when polarity comes from the ablation head.
    pub decoder: Option<DecoderTrace>,
    /// Per-row distributions over `POS, NEU, NEG, O`.
    pub polarity: Var,
}

pub fn absa_forward(
    g: &mut Graph,
    p: &Bound,
    model: &ModelParams,
    batch: &Batch,
    flags: PropagationFlags,
    ctx: &mut ForwardCtx,
) -> Result<AbsaForward> {
    let cfg = &model.config;
    let enc = encode(g, p, &model.encoder, cfg, batch, ctx)?;
    let ate = extraction_forward(g, p, &enc, &model.ate_head)?;
    let ote = extraction_forward(g, p, &enc, &model.ote_head)?;
    let (decoder, polarity) = if flags.enable_ap || flags.enable_op {
        let trace = propagate(g, p, &enc, ate.z, ote.z, &model.decoder, cfg, flags, ctx)?;
        let probs = polarity_forward(g, p, &trace, &model.decoder)?;
        (Some(trace), probs)
    } else {
        (None, ablation_polarity_head(g, p, &enc, &model.ablation_head)?)
    };
    Ok(AbsaForward {
        encoder: enc,
        ate,
        ote,
        decoder,
        polarity,
    })
}

/// Extraction and polarity losses `(ate, ote, asc)` against the batch's
/// gold tag sequences.
pub fn absa_losses(g: &mut Graph, fwd: &AbsaForward, batch: &Batch) -> Result<(Var, Var, Var)> {
    if batch.kind != InstanceKind::Absa {
        return Err(Error::contract("main-task loss on an auxiliary batch"));
    }
    let mut aspect = Vec::with_capacity(batch.size());
    let mut opinion = Vec::with_capacity(batch.size());
    let mut polarity = Vec::with_capacity(batch.size());
    for inst in &batch.instances {
        let labels = inst
            .labels()
            .ok_or_else(|| Error::contract("main-task instance without labels"))?;
        aspect.push(labels.aspect_tags.iter().map(|t| t.index()).collect());
        opinion.push(labels.opinion_tags.iter().map(|t| t.index()).collect());
        polarity.push(labels.polarity_tags.iter().map(|t| t.index()).collect());
    }
    let ate = extraction_loss(g, &fwd.ate, &fwd.encoder, &aspect)?;
    let ote = extraction_loss(g, &fwd.ote, &fwd.encoder, &opinion)?;
    let asc = asc_loss(g, fwd.polarity, &fwd.encoder, &polarity)?;
    Ok((ate, ote, asc))
}

/// Encoder pass over an auxiliary batch and the NLL of its `[CLS]` head.
pub fn aux_batch_loss(
    g: &mut Graph,
    p: &Bound,
    model: &ModelParams,
    batch: &Batch,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let kind = match batch.kind {
        InstanceKind::Tsmtd => AuxKind::Tsmtd,
        InstanceKind::Prd => AuxKind::Prd,
        InstanceKind::Absa => return Err(Error::contract("auxiliary loss on a main-task batch")),
    };
    let targets: Vec<AuxTarget> = batch
        .instances
        .iter()
        .map(|i| i.aux_target().ok_or_else(|| Error::contract("auxiliary instance without target")))
        .collect::<Result<_>>()?;
    let enc = encode(g, p, &model.encoder, &model.config, batch, ctx)?;
    let h_cls = enc.h_cls(g)?;
    let probs = aux_forward(g, p, h_cls, &model.aux, kind)?;
    aux_loss(g, probs, &targets)
}
