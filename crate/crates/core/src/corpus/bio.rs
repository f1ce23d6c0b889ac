use serde::{Deserialize, Serialize};

use super::{validate_sentence, AnnotatedSentence, Polarity, Span};
use crate::error::{Error, Result};

/// Class order is fixed: `B = 0`, `I = 1`, `O = 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BioTag {
    B,
    I,
    O,
}

impl BioTag {
    pub const ALL: [BioTag; 3] = [BioTag::B, BioTag::I, BioTag::O];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// Class order is fixed: `POS, NEU, NEG, O`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolarityTag {
    Pos,
    Neu,
    Neg,
    O,
}

impl PolarityTag {
    pub const ALL: [PolarityTag; 4] = [
        PolarityTag::Pos,
        PolarityTag::Neu,
        PolarityTag::Neg,
        PolarityTag::O,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn polarity(self) -> Option<Polarity> {
        match self {
            PolarityTag::Pos => Some(Polarity::Pos),
            PolarityTag::Neu => Some(Polarity::Neu),
            PolarityTag::Neg => Some(Polarity::Neg),
            PolarityTag::O => None,
        }
    }
}

impl From<Polarity> for PolarityTag {
    fn from(p: Polarity) -> Self {
        match p {
            Polarity::Pos => PolarityTag::Pos,
            Polarity::Neu => PolarityTag::Neu,
            Polarity::Neg => PolarityTag::Neg,
        }
    }
}

/// Gold tag sequences for one sentence, one entry per token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSequences {
    pub aspect_tags: Vec<BioTag>,
    pub opinion_tags: Vec<BioTag>,
    pub polarity_tags: Vec<PolarityTag>,
}

impl LabelSequences {
    pub fn len(&self) -> usize {
        self.aspect_tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aspect_tags.is_empty()
    }

    /// Equal lengths, polarity set exactly on aspect positions, and one
    /// polarity per aspect chunk.
    pub fn is_consistent(&self) -> bool {
        let n = self.aspect_tags.len();
        if self.opinion_tags.len() != n || self.polarity_tags.len() != n {
            return false;
        }
        let aligned = self
            .aspect_tags
            .iter()
            .zip(&self.polarity_tags)
            .all(|(a, p)| (*a != BioTag::O) == (*p != PolarityTag::O));
        aligned
            && decode_chunks(&self.aspect_tags, None)
                .expect("equal lengths")
                .iter()
                .all(|c| {
                    let first = self.polarity_tags[c.span.start];
                    self.polarity_tags[c.span.start..c.span.end]
                        .iter()
                        .all(|&t| t == first)
                })
    }
}

pub fn encode_bio(s: &AnnotatedSentence) -> Result<LabelSequences> {
    if let Some(v) = validate_sentence(s).first() {
        return Err(Error::contract(format!("encode_bio on invalid sentence: {v}")));
    }
    let n = s.tokens.len();
    let mut aspect_tags = vec![BioTag::O; n];
    let mut opinion_tags = vec![BioTag::O; n];
    let mut polarity_tags = vec![PolarityTag::O; n];
    for a in &s.aspects {
        for i in a.start..a.end {
            aspect_tags[i] = if i == a.start { BioTag::B } else { BioTag::I };
            polarity_tags[i] = a.polarity.into();
        }
    }
    for o in &s.opinions {
        for i in o.start..o.end {
            opinion_tags[i] = if i == o.start { BioTag::B } else { BioTag::I };
        }
    }
    Ok(LabelSequences {
        aspect_tags,
        opinion_tags,
        polarity_tags,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Chunk {
    pub span: Span,
    pub polarity: Option<Polarity>,
}

/// Decodes maximal `B I*` runs into spans. An `I` that does not continue a
/// chunk opens a new one.
///
/// With `polarity_tags`, each chunk takes the majority non-`O` polarity over
/// its positions. Ties go to the tag at the chunk's first position when it
/// is among the tied tags, otherwise to the tied tag seen first. A chunk
/// whose positions are all `O` gets no polarity.
pub fn decode_chunks(tags: &[BioTag], polarity_tags: Option<&[PolarityTag]>) -> Result<Vec<Chunk>> {
    if let Some(p) = polarity_tags {
        if p.len() != tags.len() {
            return Err(Error::contract(format!(
                "decode_chunks: {} tags but {} polarity tags",
                tags.len(),
                p.len()
            )));
        }
    }
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (i, tag) in tags.iter().enumerate() {
        match tag {
            BioTag::B => {
                if let Some(s) = open.take() {
                    spans.push(Span::new(s, i));
                }
                open = Some(i);
            }
            BioTag::I => {
                if open.is_none() {
                    open = Some(i);
                }
            }
            BioTag::O => {
                if let Some(s) = open.take() {
                    spans.push(Span::new(s, i));
                }
            }
        }
    }
    if let Some(s) = open {
        spans.push(Span::new(s, tags.len()));
    }
    Ok(spans
        .into_iter()
        .map(|span| Chunk {
            span,
            polarity: polarity_tags.and_then(|p| vote(&p[span.start..span.end])),
        })
        .collect())
}

fn vote(tags: &[PolarityTag]) -> Option<Polarity> {
    let mut counts = [0usize; 3];
    for t in tags {
        if let Some(p) = t.polarity() {
            counts[p.index()] += 1;
        }
    }
    let best = *counts.iter().max()?;
    if best == 0 {
        return None;
    }
    let tied = |p: Polarity| counts[p.index()] == best;
    if let Some(first) = tags[0].polarity() {
        if tied(first) {
            return Some(first);
        }
    }
    tags.iter().filter_map(|t| t.polarity()).find(|&p| tied(p))
}
