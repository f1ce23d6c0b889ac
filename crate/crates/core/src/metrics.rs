//! Chunk-level evaluation: term extraction F1, joint aspect+polarity F1,
//! polarity classification F1 on correctly extracted aspects, and
//! sentence-level exact-match accuracy, optionally stratified by the
//! number of gold aspects per sentence.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedSentence, Polarity, Span};
use crate::error::{Error, Result};

/// Aspect and opinion chunks of one sentence, gold or predicted.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceLabels {
    pub aspects: Vec<(Span, Polarity)>,
    pub opinions: Vec<Span>,
}

impl From<&AnnotatedSentence> for SentenceLabels {
    fn from(s: &AnnotatedSentence) -> Self {
        Self {
            aspects: s.aspects.iter().map(|a| (a.span(), a.polarity)).collect(),
            opinions: s.opinions.clone(),
        }
    }
}

impl SentenceLabels {
    pub fn aspect_spans(&self) -> Vec<Span> {
        self.aspects.iter().map(|&(s, _)| s).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub gold: usize,
    pub predicted: usize,
    pub matched: usize,
}

impl Counts {
    fn add(&mut self, other: Counts) {
        self.gold += other.gold;
        self.predicted += other.predicted;
        self.matched += other.matched;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Ratio with `0 / 0 = 0`.
fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

impl From<Counts> for Prf {
    fn from(c: Counts) -> Self {
        let precision = ratio(c.matched, c.predicted);
        let recall = ratio(c.matched, c.gold);
        Prf {
            precision,
            recall,
            f1: f1_from(precision, recall),
        }
    }
}

fn set_counts<T: std::hash::Hash + Eq + Copy>(gold: &[T], pred: &[T]) -> Counts {
    let g: HashSet<T> = gold.iter().copied().collect();
    let p: HashSet<T> = pred.iter().copied().collect();
    Counts {
        gold: g.len(),
        predicted: p.len(),
        matched: g.intersection(&p).count(),
    }
}

fn check_aligned<A, B>(gold: &[A], pred: &[B]) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::contract(format!(
            "{} gold sentences but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    Ok(())
}

/// Exact-boundary span matching, micro-averaged over sentences.
pub fn chunk_counts(gold: &[Vec<Span>], pred: &[Vec<Span>]) -> Result<Counts> {
    check_aligned(gold, pred)?;
    let mut total = Counts::default();
    for (g, p) in gold.iter().zip(pred) {
        total.add(set_counts(g, p));
    }
    Ok(total)
}

pub fn chunk_f1(gold: &[Vec<Span>], pred: &[Vec<Span>]) -> Result<Prf> {
    chunk_counts(gold, pred).map(Prf::from)
}

/// A match needs the same span and the same polarity.
pub fn absa_counts(gold: &[Vec<(Span, Polarity)>], pred: &[Vec<(Span, Polarity)>]) -> Result<Counts> {
    check_aligned(gold, pred)?;
    let mut total = Counts::default();
    for (g, p) in gold.iter().zip(pred) {
        total.add(set_counts(g, p));
    }
    Ok(total)
}

pub fn absa_f1(gold: &[Vec<(Span, Polarity)>], pred: &[Vec<(Span, Polarity)>]) -> Result<Prf> {
    absa_counts(gold, pred).map(Prf::from)
}

/// `(gold, predicted)` polarity of every gold aspect whose span was also
/// predicted. A span predicted more than once uses its first polarity.
pub fn extracted_polarities(
    gold: &[Vec<(Span, Polarity)>],
    pred: &[Vec<(Span, Polarity)>],
) -> Result<Vec<(Polarity, Polarity)>> {
    check_aligned(gold, pred)?;
    let mut out = Vec::new();
    for (g, p) in gold.iter().zip(pred) {
        let mut by_span: HashMap<Span, Polarity> = HashMap::new();
        for &(span, pol) in p {
            by_span.entry(span).or_insert(pol);
        }
        let mut seen = HashSet::new();
        for &(span, pol) in g {
            if !seen.insert(span) {
                continue;
            }
            if let Some(&q) = by_span.get(&span) {
                out.push((pol, q));
            }
        }
    }
    Ok(out)
}

/// Macro F1 over the polarity classes present among the gold aspects that
/// were correctly extracted. Zero when no gold aspect was extracted.
pub fn asc_f1(gold: &[Vec<(Span, Polarity)>], pred: &[Vec<(Span, Polarity)>]) -> Result<f64> {
    let pairs = extracted_polarities(gold, pred)?;
    let mut scores = Vec::new();
    for class in Polarity::ALL {
        let support = pairs.iter().filter(|(g, _)| *g == class).count();
        if support == 0 {
            continue;
        }
        let tp = pairs.iter().filter(|&&(g, p)| g == class && p == class).count();
        let predicted = pairs.iter().filter(|(_, p)| *p == class).count();
        scores.push(f1_from(ratio(tp, predicted), ratio(tp, support)));
    }
    Ok(if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    })
}

/// Fraction of sentences whose predicted `(span, polarity)` set equals the
/// gold set exactly. Zero for an empty corpus.
pub fn sentence_accuracy(gold: &[Vec<(Span, Polarity)>], pred: &[Vec<(Span, Polarity)>]) -> Result<f64> {
    check_aligned(gold, pred)?;
    let exact = gold
        .iter()
        .zip(pred)
        .filter(|(g, p)| {
            let g: HashSet<_> = g.iter().collect();
            let p: HashSet<_> = p.iter().collect();
            g == p
        })
        .count();
    Ok(ratio(exact, gold.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Strata {
    /// Sentences with exactly one gold aspect; absent when there are none.
    pub single_aspect: Option<Box<MetricsReport>>,
    /// Sentences with two or more gold aspects; absent when there are none.
    pub multiple_aspect: Option<Box<MetricsReport>>,
    /// Sentences with no gold aspect, which belong to neither stratum.
    pub zero_aspect_sentences: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sentences: usize,
    pub ate_f1: f64,
    pub ote_f1: f64,
    pub asc_f1: f64,
    pub absa_f1: f64,
    pub sent_acc: f64,
    pub ate_counts: Counts,
    pub ote_counts: Counts,
    pub absa_counts: Counts,
    /// Gold aspects whose span was extracted (the polarity F1 support).
    pub asc_support: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strata: Option<Strata>,
}

fn split(labels: &[SentenceLabels]) -> (Vec<Vec<(Span, Polarity)>>, Vec<Vec<Span>>, Vec<Vec<Span>>) {
    let aspects = labels.iter().map(|l| l.aspects.clone()).collect();
    let spans = labels.iter().map(SentenceLabels::aspect_spans).collect();
    let opinions = labels.iter().map(|l| l.opinions.clone()).collect();
    (aspects, spans, opinions)
}

/// Full report without strata.
pub fn score(gold: &[SentenceLabels], pred: &[SentenceLabels]) -> Result<MetricsReport> {
    check_aligned(gold, pred)?;
    let (g_asp, g_spans, g_op) = split(gold);
    let (p_asp, p_spans, p_op) = split(pred);
    let ate = chunk_counts(&g_spans, &p_spans)?;
    let ote = chunk_counts(&g_op, &p_op)?;
    let absa = absa_counts(&g_asp, &p_asp)?;
    Ok(MetricsReport {
        sentences: gold.len(),
        ate_f1: Prf::from(ate).f1,
        ote_f1: Prf::from(ote).f1,
        asc_f1: asc_f1(&g_asp, &p_asp)?,
        absa_f1: Prf::from(absa).f1,
        sent_acc: sentence_accuracy(&g_asp, &p_asp)?,
        ate_counts: ate,
        ote_counts: ote,
        absa_counts: absa,
        asc_support: extracted_polarities(&g_asp, &p_asp)?.len(),
        strata: None,
    })
}

pub fn stratify_by_aspect_count(gold: &[SentenceLabels], pred: &[SentenceLabels]) -> Result<Strata> {
    check_aligned(gold, pred)?;
    let mut single = (Vec::new(), Vec::new());
    let mut multiple = (Vec::new(), Vec::new());
    let mut zero = 0;
    for (g, p) in gold.iter().zip(pred) {
        let distinct: HashSet<Span> = g.aspects.iter().map(|&(s, _)| s).collect();
        let bucket = match distinct.len() {
            0 => {
                zero += 1;
                continue;
            }
            1 => &mut single,
            _ => &mut multiple,
        };
        bucket.0.push(g.clone());
        bucket.1.push(p.clone());
    }
    let sub = |(g, p): (Vec<SentenceLabels>, Vec<SentenceLabels>)| -> Result<Option<Box<MetricsReport>>> {
        if g.is_empty() {
            Ok(None)
        } else {
            Ok(Some(Box::new(score(&g, &p)?)))
        }
    };
    Ok(Strata {
        single_aspect: sub(single)?,
        multiple_aspect: sub(multiple)?,
        zero_aspect_sentences: zero,
    })
}

/// Full report including the single/multiple aspect strata.
pub fn evaluate(gold: &[SentenceLabels], pred: &[SentenceLabels]) -> Result<MetricsReport> {
    let mut report = score(gold, pred)?;
    report.strata = Some(stratify_by_aspect_count(gold, pred)?);
    Ok(report)
}
