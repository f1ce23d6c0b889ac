//! Pair-annotated ABSA sentences: data model, JSONL ingestion and
//! validation.

mod bio;
mod synth;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bio::{decode_chunks, encode_bio, BioTag, Chunk, LabelSequences, PolarityTag};
pub use synth::{generate_synthetic, split_corpus, Lexicon, SynthConfig, CUE_WORDS};

/// Token range, end-exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.start <= pos && pos < self.end
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.start, self.end)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Polarity {
    #[serde(rename = "POS")]
    Pos,
    #[serde(rename = "NEU")]
    Neu,
    #[serde(rename = "NEG")]
    Neg,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Pos, Polarity::Neu, Polarity::Neg];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Pos => "POS",
            Polarity::Neu => "NEU",
            Polarity::Neg => "NEG",
        }
    }

    /// Positive and negative swap; neutral stays.
    pub fn flipped(self) -> Polarity {
        match self {
            Polarity::Pos => Polarity::Neg,
            Polarity::Neg => Polarity::Pos,
            Polarity::Neu => Polarity::Neu,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Aspect {
    pub start: usize,
    pub end: usize,
    pub polarity: Polarity,
}

impl Aspect {
    pub fn new(span: Span, polarity: Polarity) -> Self {
        Self {
            start: span.start,
            end: span.end,
            polarity,
        }
    }

    pub fn span(&self) -> Span {
        Span::new(self.start, self.end)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedSentence {
    pub tokens: Vec<String>,
    pub aspects: Vec<Aspect>,
    pub opinions: Vec<Span>,
    /// `(aspect index, opinion index)` links.
    pub pairs: Vec<(usize, usize)>,
}

impl AnnotatedSentence {
    pub fn from_text(text: &str) -> Self {
        Self {
            tokens: text.split_whitespace().map(str::to_string).collect(),
            aspects: Vec::new(),
            opinions: Vec::new(),
            pairs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    /// Every invariant violation; empty means valid.
    pub fn violations(&self) -> Vec<Violation> {
        validate_sentence(self)
    }

    pub fn is_valid(&self) -> bool {
        self.violations().is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    EmptySentence,
    EmptyToken { index: usize },
    SpanOrder { field: &'static str, index: usize },
    SpanOutOfRange { field: &'static str, index: usize },
    AspectOverlap { first: usize, second: usize },
    OpinionOverlap { first: usize, second: usize },
    AspectOpinionOverlap { aspect: usize, opinion: usize },
    DanglingPair { index: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptySentence => write!(f, "tokens: sentence has no tokens"),
            Violation::EmptyToken { index } => write!(f, "tokens[{index}]: empty token"),
            Violation::SpanOrder { field, index } => {
                write!(f, "{field}[{index}]: start < end violated")
            }
            Violation::SpanOutOfRange { field, index } => {
                write!(f, "{field}[{index}]: span exceeds sentence length")
            }
            Violation::AspectOverlap { first, second } => {
                write!(f, "aspects[{first}], aspects[{second}]: aspect overlap")
            }
            Violation::OpinionOverlap { first, second } => {
                write!(f, "opinions[{first}], opinions[{second}]: opinion overlap")
            }
            Violation::AspectOpinionOverlap { aspect, opinion } => write!(
                f,
                "aspects[{aspect}], opinions[{opinion}]: aspect/opinion overlap"
            ),
            Violation::DanglingPair { index } => write!(f, "pairs[{index}]: dangling pair index"),
        }
    }
}

pub fn validate_sentence(s: &AnnotatedSentence) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = s.tokens.len();
    if n == 0 {
        out.push(Violation::EmptySentence);
    }
    for (index, t) in s.tokens.iter().enumerate() {
        if t.is_empty() {
            out.push(Violation::EmptyToken { index });
        }
    }

    let check_spans = |field: &'static str, spans: &[Span], out: &mut Vec<Violation>| -> Vec<bool> {
        spans
            .iter()
            .enumerate()
            .map(|(index, sp)| {
                if sp.start >= sp.end {
                    out.push(Violation::SpanOrder { field, index });
                    false
                } else if sp.end > n {
                    out.push(Violation::SpanOutOfRange { field, index });
                    false
                } else {
                    true
                }
            })
            .collect()
    };
    let aspect_spans: Vec<Span> = s.aspects.iter().map(Aspect::span).collect();
    let aspect_ok = check_spans("aspects", &aspect_spans, &mut out);
    let opinion_ok = check_spans("opinions", &s.opinions, &mut out);

    for i in 0..aspect_spans.len() {
        for j in i + 1..aspect_spans.len() {
            if aspect_ok[i] && aspect_ok[j] && aspect_spans[i].overlaps(&aspect_spans[j]) {
                out.push(Violation::AspectOverlap { first: i, second: j });
            }
        }
    }
    for i in 0..s.opinions.len() {
        for j in i + 1..s.opinions.len() {
            if opinion_ok[i] && opinion_ok[j] && s.opinions[i].overlaps(&s.opinions[j]) {
                out.push(Violation::OpinionOverlap { first: i, second: j });
            }
        }
    }
    for (a, asp) in aspect_spans.iter().enumerate() {
        for (o, op) in s.opinions.iter().enumerate() {
            if aspect_ok[a] && opinion_ok[o] && asp.overlaps(op) {
                out.push(Violation::AspectOpinionOverlap {
                    aspect: a,
                    opinion: o,
                });
            }
        }
    }
    for (index, &(a, o)) in s.pairs.iter().enumerate() {
        if a >= s.aspects.len() || o >= s.opinions.len() {
            out.push(Violation::DanglingPair { index });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub split: Split,
    pub sentences: Vec<AnnotatedSentence>,
}

impl Corpus {
    /// Builds a corpus, rejecting any invalid sentence.
    pub fn new(name: impl Into<String>, split: Split, sentences: Vec<AnnotatedSentence>) -> Result<Self> {
        for (i, s) in sentences.iter().enumerate() {
            if let Some(v) = validate_sentence(s).first() {
                return Err(Error::validation(format!("sentence {}: {v}", i + 1)));
            }
        }
        Ok(Self {
            name: name.into(),
            split,
            sentences,
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// One JSON object per line, LF-terminated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            out.push_str(&serde_json::to_string(s).expect("sentence serializes"));
            out.push('\n');
        }
        out
    }
}

/// Parses a UTF-8 JSONL stream. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_corpus(raw: &[u8], name: &str, split: Split) -> Result<Corpus> {
    let mut sentences = Vec::new();
    for (i, line) in raw.split(|&b| b == b'\n').enumerate() {
        let line_no = i + 1;
        let text = std::str::from_utf8(line).map_err(|e| Error::Parse {
            line: line_no,
            message: format!("invalid UTF-8: {e}"),
        })?;
        let text = text.strip_suffix('\r').unwrap_or(text);
        if text.trim().is_empty() {
            continue;
        }
        let sentence: AnnotatedSentence = serde_json::from_str(text).map_err(|e| {
            use serde_json::error::Category;
            match e.classify() {
                Category::Data => {
                    Error::validation(format!("line {line_no}: schema violation: {e}"))
                }
                _ => Error::Parse {
                    line: line_no,
                    message: e.to_string(),
                },
            }
        })?;
        if let Some(v) = validate_sentence(&sentence).first() {
            return Err(Error::validation(format!("line {line_no}: {v}")));
        }
        sentences.push(sentence);
    }
    Ok(Corpus {
        name: name.to_string(),
        split,
        sentences,
    })
}
