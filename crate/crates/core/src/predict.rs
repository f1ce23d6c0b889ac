//! Inference: tag argmax, chunk decoding and per-aspect polarity.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::corpus::{decode_chunks, AnnotatedSentence, BioTag, Corpus, Polarity, PolarityTag, Span};
use crate::decoder::PropagationFlags;
use crate::error::{Error, Result};
use crate::layers::ForwardCtx;
use crate::metrics::{evaluate, MetricsReport, SentenceLabels};
use crate::text::{encode_tokens, pad_batch, Vocabulary};
use crate::train::{absa_forward, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedAspect {
    pub start: usize,
    pub end: usize,
    pub polarity: Polarity,
}

impl PredictedAspect {
    pub fn span(&self) -> Span {
        Span::new(self.start, self.end)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePrediction {
    pub tokens: Vec<String>,
    pub aspects: Vec<PredictedAspect>,
    pub opinions: Vec<Span>,
}

impl SentencePrediction {
    pub fn labels(&self) -> SentenceLabels {
        SentenceLabels {
            aspects: self.aspects.iter().map(|a| (a.span(), a.polarity)).collect(),
            opinions: self.opinions.clone(),
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Chunks and polarities from per-token distributions: `aspect` and
/// `opinion` are `[n x 3]` (B, I, O) and `polarity` is `[n x 4]`.
pub fn decode_prediction(tokens: &[String], aspect: &Tensor, opinion: &Tensor, polarity: &Tensor) -> Result<SentencePrediction> {
    let n = tokens.len();
    if aspect.rows() != n || opinion.rows() != n || polarity.rows() != n {
        return Err(Error::contract("distribution rows differ from token count"));
    }
    let bio = |t: &Tensor| -> Vec<BioTag> {
        (0..n)
            .map(|r| BioTag::from_index(argmax(t.row(r))).expect("three classes"))
            .collect()
    };
    let pol_tags: Vec<PolarityTag> = (0..n)
        .map(|r| PolarityTag::from_index(argmax(polarity.row(r))).expect("four classes"))
        .collect();
    let mut aspects = Vec::new();
    for chunk in decode_chunks(&bio(aspect), Some(&pol_tags))? {
        let pol = match chunk.polarity {
            Some(p) => p,
            None => {
                let mut mass = [0.0; 3];
                for r in chunk.span.start..chunk.span.end {
                    for (k, m) in mass.iter_mut().enumerate() {
                        *m += polarity.row(r)[k];
                    }
                }
                Polarity::ALL[argmax(&mass)]
            }
        };
        aspects.push(PredictedAspect {
            start: chunk.span.start,
            end: chunk.span.end,
            polarity: pol,
        });
    }
    let opinions = decode_chunks(&bio(opinion), None)?.into_iter().map(|c| c.span).collect();
    Ok(SentencePrediction {
        tokens: tokens.to_vec(),
        aspects,
        opinions,
    })
}

/// Eval-mode predictions for raw token sequences, `batch_size` at a time.
pub fn predict_sentences(
    model: &ModelParams,
    vocab: &Vocabulary,
    flags: PropagationFlags,
    sentences: &[Vec<String>],
    batch_size: usize,
) -> Result<Vec<SentencePrediction>> {
    if batch_size == 0 {
        return Err(Error::validation("batch size must be at least 1"));
    }
    let max_len = model.config.max_len;
    if let Some(s) = sentences.iter().find(|s| s.len() + 2 > max_len) {
        return Err(Error::validation(format!(
            "sentence of {} tokens exceeds max_len {max_len}",
            s.len()
        )));
    }
    let mut out: Vec<Option<SentencePrediction>> = sentences
        .iter()
        .map(|s| {
            s.is_empty().then(|| SentencePrediction {
                tokens: Vec::new(),
                aspects: Vec::new(),
                opinions: Vec::new(),
            })
        })
        .collect();
    let pending: Vec<usize> = (0..sentences.len()).filter(|&i| out[i].is_none()).collect();
    for chunk in pending.chunks(batch_size) {
        let batch = pad_batch(chunk.iter().map(|&i| encode_tokens(&sentences[i], vocab)).collect())?;
        let mut g = Graph::new();
        let p = model.store.bind(&mut g);
        let fwd = absa_forward(&mut g, &p, model, &batch, flags, &mut ForwardCtx::eval())?;
        for (b, &i) in chunk.iter().enumerate() {
            let rows: Vec<usize> = fwd.encoder.token_rows(b).collect();
            let aspect = fwd.ate.token_probs(&g, &fwd.encoder, b);
            let opinion = fwd.ote.token_probs(&g, &fwd.encoder, b);
            let polarity = g.value(fwd.polarity).select_rows(&rows);
            if !(aspect.is_finite() && opinion.is_finite() && polarity.is_finite()) {
                return Err(Error::NonFinite(format!("prediction for sentence {i}")));
            }
            out[i] = Some(decode_prediction(&sentences[i], &aspect, &opinion, &polarity)?);
        }
    }
    Ok(out.into_iter().map(|p| p.expect("every sentence predicted")).collect())
}

pub fn predict_sentence(
    model: &ModelParams,
    vocab: &Vocabulary,
    flags: PropagationFlags,
    tokens: &[String],
) -> Result<SentencePrediction> {
    let mut v = predict_sentences(model, vocab, flags, &[tokens.to_vec()], 1)?;
    Ok(v.remove(0))
}

/// Predicts every sentence of `corpus` and scores against its annotations.
pub fn evaluate_corpus(
    model: &ModelParams,
    vocab: &Vocabulary,
    flags: PropagationFlags,
    corpus: &Corpus,
    batch_size: usize,
) -> Result<MetricsReport> {
    let tokens: Vec<Vec<String>> = corpus.sentences.iter().map(|s| s.tokens.clone()).collect();
    let preds = predict_sentences(model, vocab, flags, &tokens, batch_size)?;
    let gold: Vec<SentenceLabels> = corpus.sentences.iter().map(SentenceLabels::from).collect();
    let pred: Vec<SentenceLabels> = preds.iter().map(SentencePrediction::labels).collect();
    evaluate(&gold, &pred)
}

/// One JSON object per line: tokens, aspects with polarity, opinions.
pub fn predictions_jsonl(preds: &[SentencePrediction]) -> String {
    let mut out = String::new();
    for p in preds {
        out.push_str(&serde_json::to_string(p).expect("prediction serializes"));
        out.push('\n');
    }
    out
}

/// Gold annotations rendered in the prediction format, for side-by-side diffs.
pub fn gold_as_prediction(s: &AnnotatedSentence) -> SentencePrediction {
    SentencePrediction {
        tokens: s.tokens.clone(),
        aspects: s
            .aspects
            .iter()
            .map(|a| PredictedAspect {
                start: a.start,
                end: a.end,
                polarity: a.polarity,
            })
            .collect(),
        opinions: s.opinions.clone(),
    }
}
