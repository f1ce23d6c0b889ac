use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{step, AdamW, Checkpoint, LossBreakdown, ModelParams, StepBatches, TrainConfig};
use crate::auxgen::generate_aux;
use crate::corpus::Corpus;
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::ForwardCtx;
use crate::metrics::MetricsReport;
use crate::predict::evaluate_corpus;
use crate::text::{build_vocab, encode_absa, pad_batch, EncodedInstance, InstanceKind};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_ate: f64,
    pub l_ote: f64,
    pub l_asc: f64,
    pub l_tsmtd: f64,
    pub l_prd: f64,
    pub l_final: f64,
    pub dev: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best dev joint F1 (initialization if no epoch ran).
    pub best: Checkpoint,
    /// Parameters after the last epoch.
    pub last: Checkpoint,
    pub log: Vec<EpochRecord>,
    /// Loss breakdown of every optimizer step, in order.
    pub steps: Vec<LossBreakdown>,
}

pub fn train_loop(train: &Corpus, dev: &Corpus, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_loop_with(train, dev, model_cfg, cfg, |_| Ok(()))
}

/// Training loop that hands each epoch record to `on_epoch` as soon as it
/// is complete. The vocabulary is built from `train` and overrides
/// `model_cfg.vocab_size`.
pub fn train_loop_with<F>(
    train: &Corpus,
    dev: &Corpus,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord) -> Result<()>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::validation("training split is empty"));
    }
    let vocab = build_vocab(train, 1)?;
    let mut mcfg = model_cfg.clone();
    mcfg.vocab_size = vocab.len();
    let longest = train.sentences.iter().chain(&dev.sentences).map(|s| s.len() + 2).max().unwrap_or(0);
    if longest > mcfg.max_len {
        return Err(Error::validation(format!(
            "a sentence needs {longest} positions but max_len is {}",
            mcfg.max_len
        )));
    }
    let mut model = ModelParams::init(&mcfg, cfg.seed)?;
    let mut opt = AdamW::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let encoded: Vec<EncodedInstance> = train
        .sentences
        .iter()
        .map(|s| encode_absa(s, &vocab))
        .collect::<Result<_>>()?;

    let mut best = Checkpoint::new(&model, cfg, &vocab, &rng, 0);
    let mut best_f1 = f64::NEG_INFINITY;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    let mut order: Vec<usize> = (0..encoded.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let absa = pad_batch(chunk.iter().map(|&i| encoded[i].clone()).collect())?;
            let mut ctx = ForwardCtx::train(mcfg.dropout, rng.gen());
            let sentences = chunk.iter().map(|&i| &train.sentences[i]);
            let (tsmtd, prd) = generate_aux(sentences, &vocab, cfg.tsmtd_per_sentence, &mut rng);
            let aux_batch = |enabled: bool, items: Vec<EncodedInstance>| -> Result<Option<_>> {
                if enabled && !items.is_empty() {
                    Ok(Some(pad_batch(items)?))
                } else {
                    Ok(None)
                }
            };
            let batches = StepBatches {
                absa,
                tsmtd: aux_batch(cfg.enable_tsmtd, tsmtd)?,
                prd: aux_batch(cfg.enable_prd, prd)?,
            };
            debug_assert_eq!(batches.absa.kind, InstanceKind::Absa);
            let losses = step(&mut model, &mut opt, &batches, cfg, &mut ctx)?;
            epoch_losses.push(losses);
            steps.push(losses);
        }
        let report = evaluate_corpus(&model, &vocab, cfg.flags(), dev, cfg.batch_size.max(32))?;
        let mean = LossBreakdown::mean(&epoch_losses);
        if report.absa_f1 > best_f1 {
            best_f1 = report.absa_f1;
            best = Checkpoint::new(&model, cfg, &vocab, &rng, epoch);
        }
        let record = EpochRecord {
            epoch,
            l_ate: mean.l_ate,
            l_ote: mean.l_ote,
            l_asc: mean.l_asc,
            l_tsmtd: mean.l_tsmtd,
            l_prd: mean.l_prd,
            l_final: mean.l_final,
            dev: report,
        };
        on_epoch(&record)?;
        log.push(record);
    }
    let last = Checkpoint::new(&model, cfg, &vocab, &rng, cfg.epochs);
    Ok(TrainOutcome { best, last, log, steps })
}
