//! Auxiliary training instances: masked-term type discrimination (one span
//! replaced by `[MASK]`) and pair relation discrimination (one aspect and
//! one opinion replaced by `[REL]`), with the negative pair sampler.

use std::collections::HashSet;

use rand::Rng;
use serde::Serialize;

use crate::corpus::{AnnotatedSentence, Span};
use crate::heads::{AuxTarget, TermType};
use crate::text::{EncodedInstance, InstanceKind, Target, Vocabulary, MASK, REL};

/// Longest unannotated run that may be masked as an `O` term.
pub const MAX_O_SPAN: usize = 3;

/// Probability threshold below which the pair sampler returns a true pair.
pub const TRUE_PAIR_THRESHOLD: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct TsmtdInstance {
    pub instance: EncodedInstance,
    /// Span of the source sentence that was masked.
    pub masked: Span,
    pub target: TermType,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrdInstance {
    pub instance: EncodedInstance,
    /// Index into the sentence's aspects.
    pub aspect: usize,
    /// Index into the sentence's opinions.
    pub opinion: usize,
    pub target: bool,
}

/// All 1..=3 token spans that overlap no aspect or opinion.
pub fn eligible_o_spans(s: &AnnotatedSentence) -> Vec<Span> {
    let annotated: Vec<Span> = s.aspects.iter().map(|a| a.span()).chain(s.opinions.iter().copied()).collect();
    let mut spans = Vec::new();
    for len in 1..=MAX_O_SPAN {
        for start in 0..s.tokens.len().saturating_sub(len - 1) {
            let span = Span::new(start, start + len);
            if !annotated.iter().any(|a| a.overlaps(&span)) {
                spans.push(span);
            }
        }
    }
    spans
}

/// Interior ids with each of `spans` collapsed to a single `special` id.
/// The spans must be disjoint.
fn replace_spans(s: &AnnotatedSentence, v: &Vocabulary, spans: &[Span], special: usize) -> Vec<usize> {
    let mut ids = Vec::with_capacity(s.tokens.len());
    for (i, tok) in s.tokens.iter().enumerate() {
        match spans.iter().find(|sp| sp.contains(i)) {
            Some(sp) if sp.start == i => ids.push(special),
            Some(_) => {}
            None => ids.push(v.id(tok)),
        }
    }
    ids
}

pub fn make_tsmtd<R: Rng>(s: &AnnotatedSentence, v: &Vocabulary, rng: &mut R) -> Option<TsmtdInstance> {
    let mut choices: Vec<(TermType, Vec<Span>)> = Vec::with_capacity(3);
    if !s.aspects.is_empty() {
        choices.push((TermType::Aspect, s.aspects.iter().map(|a| a.span()).collect()));
    }
    if !s.opinions.is_empty() {
        choices.push((TermType::Opinion, s.opinions.clone()));
    }
    let o_spans = eligible_o_spans(s);
    if !o_spans.is_empty() {
        choices.push((TermType::O, o_spans));
    }
    if choices.is_empty() {
        return None;
    }
    let (target, spans) = &choices[rng.gen_range(0..choices.len())];
    let masked = spans[rng.gen_range(0..spans.len())];
    let interior = replace_spans(s, v, &[masked], MASK);
    Some(TsmtdInstance {
        instance: EncodedInstance::new(interior, InstanceKind::Tsmtd, Target::Aux(AuxTarget::Tsmtd(*target))),
        masked,
        target: *target,
    })
}

/// Pair sampler given the uniform draw in `(0, 1]` that decides between a
/// true pair and a cross combination.
pub fn choose_prd_pair<R: Rng>(pairs: &[(usize, usize)], draw: f64, rng: &mut R) -> Option<((usize, usize), bool)> {
    match pairs.len() {
        0 => return None,
        1 => return Some((pairs[0], true)),
        _ => {}
    }
    let true_pair = |rng: &mut R| (pairs[rng.gen_range(0..pairs.len())], true);
    if draw <= TRUE_PAIR_THRESHOLD {
        return Some(true_pair(rng));
    }
    let annotated: HashSet<(usize, usize)> = pairs.iter().copied().collect();
    let any_negative = pairs
        .iter()
        .enumerate()
        .any(|(i, &(a, _))| pairs.iter().enumerate().any(|(j, &(_, o))| i != j && !annotated.contains(&(a, o))));
    if !any_negative {
        return Some(true_pair(rng));
    }
    loop {
        let i = rng.gen_range(0..pairs.len());
        let mut j = rng.gen_range(0..pairs.len() - 1);
        if j >= i {
            j += 1;
        }
        let cross = (pairs[i].0, pairs[j].1);
        if !annotated.contains(&cross) {
            return Some((cross, false));
        }
    }
}

pub fn sample_prd_pair<R: Rng>(pairs: &[(usize, usize)], rng: &mut R) -> Option<((usize, usize), bool)> {
    if pairs.len() < 2 {
        return choose_prd_pair(pairs, 1.0, rng);
    }
    let draw = 1.0 - rng.gen::<f64>();
    choose_prd_pair(pairs, draw, rng)
}

pub fn make_prd<R: Rng>(s: &AnnotatedSentence, v: &Vocabulary, rng: &mut R) -> Option<PrdInstance> {
    let ((aspect, opinion), target) = sample_prd_pair(&s.pairs, rng)?;
    let spans = [s.aspects[aspect].span(), s.opinions[opinion]];
    let interior = replace_spans(s, v, &spans, REL);
    Some(PrdInstance {
        instance: EncodedInstance::new(interior, InstanceKind::Prd, Target::Aux(AuxTarget::Prd(target))),
        aspect,
        opinion,
        target,
    })
}

/// One pass of auxiliary generation over `sentences`: `tsmtd_per_sentence`
/// masked instances and one relation instance per sentence, where available.
pub fn generate_aux<'a, R, I>(
    sentences: I,
    v: &Vocabulary,
    tsmtd_per_sentence: usize,
    rng: &mut R,
) -> (Vec<EncodedInstance>, Vec<EncodedInstance>)
where
    R: Rng,
    I: IntoIterator<Item = &'a AnnotatedSentence>,
{
    let mut tsmtd = Vec::new();
    let mut prd = Vec::new();
    for s in sentences {
        for _ in 0..tsmtd_per_sentence {
            if let Some(t) = make_tsmtd(s, v, rng) {
                tsmtd.push(t.instance);
            }
        }
        if let Some(p) = make_prd(s, v, rng) {
            prd.push(p.instance);
        }
    }
    (tsmtd, prd)
}

#[derive(Serialize)]
struct AuxRecord<'a> {
    ids: &'a [usize],
    kind: &'static str,
    target: String,
}

/// One JSON object per line: `{"ids": [...], "kind": "tsmtd"|"prd", "target": ...}`.
pub fn aux_jsonl(instances: &[EncodedInstance]) -> String {
    let mut out = String::new();
    for inst in instances {
        let Some(target) = inst.aux_target() else { continue };
        let kind = match inst.kind {
            InstanceKind::Tsmtd => "tsmtd",
            InstanceKind::Prd => "prd",
            InstanceKind::Absa => continue,
        };
        let rec = AuxRecord {
            ids: &inst.ids,
            kind,
            target: target.to_string(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("aux record serializes"));
        out.push('\n');
    }
    out
}
