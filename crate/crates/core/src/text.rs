//! Vocabulary, id encoding of the three input variants, and padded batches.

use std::collections::HashMap;

use crate::corpus::{encode_bio, AnnotatedSentence, Corpus, LabelSequences};
use crate::error::{Error, Result};
use crate::heads::AuxTarget;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const REL: usize = 5;

pub const RESERVED: [&str; 6] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[REL]"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Reserved tokens first, then `words` in the given order.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index = HashMap::new();
        for w in words {
            let w = w.into();
            if RESERVED.contains(&w.as_str()) || index.contains_key(&w) {
                continue;
            }
            index.insert(w.clone(), tokens.len());
            tokens.push(w);
        }
        Self { index, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of a corpus token; anything unknown (including the reserved
    /// surface strings) maps to `[UNK]`.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(Error::validation("vocabulary must start with the reserved tokens"));
        }
        let v = Self::from_words(lines[RESERVED.len()..].iter().copied());
        if v.len() != lines.len() {
            return Err(Error::validation("vocabulary contains duplicate tokens"));
        }
        Ok(v)
    }
}

/// Tokens with frequency at least `min_freq`, ordered by descending
/// frequency and then lexicographically.
pub fn build_vocab(corpus: &Corpus, min_freq: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::contract("build_vocab on an empty corpus"));
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for s in &corpus.sentences {
        for t in &s.tokens {
            *freq.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut words: Vec<(&str, usize)> = freq
        .into_iter()
        .filter(|&(w, n)| n >= min_freq.max(1) && !RESERVED.contains(&w))
        .collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(Vocabulary::from_words(words.into_iter().map(|(w, _)| w)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InstanceKind {
    Absa,
    Tsmtd,
    Prd,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Absa(LabelSequences),
    Aux(AuxTarget),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedInstance {
    /// `[CLS] ... [SEP]`.
    pub ids: Vec<usize>,
    pub kind: InstanceKind,
    /// Number of positions between `[CLS]` and `[SEP]`.
    pub token_count: usize,
    pub target: Target,
}

impl EncodedInstance {
    /// Wraps interior ids with `[CLS]`/`[SEP]`.
    pub fn new(interior: Vec<usize>, kind: InstanceKind, target: Target) -> Self {
        let token_count = interior.len();
        let mut ids = Vec::with_capacity(token_count + 2);
        ids.push(CLS);
        ids.extend(interior);
        ids.push(SEP);
        Self {
            ids,
            kind,
            token_count,
            target,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn labels(&self) -> Option<&LabelSequences> {
        match &self.target {
            Target::Absa(l) => Some(l),
            Target::Aux(_) => None,
        }
    }

    pub fn aux_target(&self) -> Option<AuxTarget> {
        match &self.target {
            Target::Aux(t) => Some(*t),
            Target::Absa(_) => None,
        }
    }
}

pub fn encode_absa(s: &AnnotatedSentence, v: &Vocabulary) -> Result<EncodedInstance> {
    let labels = encode_bio(s)?;
    let interior = s.tokens.iter().map(|t| v.id(t)).collect();
    Ok(EncodedInstance::new(interior, InstanceKind::Absa, Target::Absa(labels)))
}

/// Token ids with only the interior positions; no gold targets. Used at
/// inference time for raw text.
pub fn encode_tokens(tokens: &[String], v: &Vocabulary) -> EncodedInstance {
    let n = tokens.len();
    let labels = LabelSequences {
        aspect_tags: vec![crate::corpus::BioTag::O; n],
        opinion_tags: vec![crate::corpus::BioTag::O; n],
        polarity_tags: vec![crate::corpus::PolarityTag::O; n],
    };
    let interior = tokens.iter().map(|t| v.id(t)).collect();
    EncodedInstance::new(interior, InstanceKind::Absa, Target::Absa(labels))
}

/// Maps ids back to surface tokens, dropping `[CLS]`, `[SEP]` and `[PAD]`.
pub fn decode_ids(ids: &[usize], v: &Vocabulary) -> Vec<String> {
    ids.iter()
        .filter(|&&i| i != CLS && i != SEP && i != PAD)
        .map(|&i| v.token(i).unwrap_or(RESERVED[UNK]).to_string())
        .collect()
}

/// Right-padded batch of same-kind instances.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub kind: InstanceKind,
    pub instances: Vec<EncodedInstance>,
    /// Row-major `[batch x width]` ids.
    pub ids: Vec<usize>,
    pub width: usize,
    /// Row-major `[batch x width]`; true on real positions.
    pub mask: Vec<bool>,
    pub token_counts: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.instances.len()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.instances.iter().map(EncodedInstance::len).collect()
    }
}

pub fn pad_batch(instances: Vec<EncodedInstance>) -> Result<Batch> {
    let Some(first) = instances.first() else {
        return Err(Error::contract("pad_batch on an empty list"));
    };
    let kind = first.kind;
    if instances.iter().any(|i| i.kind != kind) {
        return Err(Error::contract("pad_batch: instances of mixed kinds"));
    }
    let width = instances.iter().map(EncodedInstance::len).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(instances.len() * width);
    let mut mask = Vec::with_capacity(instances.len() * width);
    for inst in &instances {
        ids.extend_from_slice(&inst.ids);
        ids.extend(std::iter::repeat(PAD).take(width - inst.len()));
        mask.extend(std::iter::repeat(true).take(inst.len()));
        mask.extend(std::iter::repeat(false).take(width - inst.len()));
    }
    let token_counts = instances.iter().map(|i| i.token_count).collect();
    Ok(Batch {
        kind,
        instances,
        ids,
        width,
        mask,
        token_counts,
    })
}
