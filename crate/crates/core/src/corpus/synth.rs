//! Deterministic template-based corpus generator.
//!
//! Each sentence is a sequence of clauses, one per aspect, each pairing the
//! aspect with one opinion word. In a contrastive sentence one clause wraps
//! its opinion in a cue ("not", "hardly", "i have had ... elsewhere", ...)
//! so that the gold polarity is the opposite of the opinion word's lexicon
//! polarity. Getting those right requires reading the context around the
//! pair rather than the opinion word alone.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedSentence, Aspect, Corpus, Polarity, Span, Split};
use crate::error::{Error, Result};

const ASPECT_TERMS: &[&str] = &[
    "food",
    "service",
    "staff",
    "pizza",
    "sushi",
    "wine",
    "menu",
    "decor",
    "price",
    "dessert",
    "waiter",
    "coffee",
    "pasta",
    "atmosphere",
    "music",
    "portions",
    "bread",
    "salad",
    "japanese food",
    "fresh juices",
    "wine list",
    "fish tacos",
    "outdoor seating",
    "happy hour",
    "smoothies",
    "noodles",
    "steak",
    "bartender",
    "battery life",
    "delivery time",
];

const POSITIVE_TERMS: &[&str] = &[
    "good",
    "great",
    "delicious",
    "excellent",
    "friendly",
    "amazing",
    "better",
    "tasty",
    "lovely",
    "superb",
    "perfect",
    "wonderful",
];

const NEGATIVE_TERMS: &[&str] = &[
    "dreadful",
    "bad",
    "awful",
    "terrible",
    "rude",
    "bland",
    "stale",
    "slow",
    "horrible",
    "greasy",
    "overpriced",
    "disappointing",
];

const NEUTRAL_TERMS: &[&str] = &["average", "okay", "standard", "ordinary", "typical", "acceptable"];

/// Tokens that only ever appear as polarity-flipping context.
pub const CUE_WORDS: &[&str] = &["not", "hardly", "elsewhere", "far", "supposedly"];

const PREFIXES: &[&[&str]] = &[&["honestly", ","], &["overall", ","], &["to", "be", "fair", ","]];
const CONNECTORS: &[&[&str]] = &[&[","], &["but"], &["and"], &[",", "while"], &[",", "and"]];
const ENDINGS: &[&str] = &[".", "!"];

#[derive(Clone, Copy)]
enum Slot {
    Word(&'static str),
    Aspect,
    Opinion,
}

use Slot::{Aspect as A, Opinion as O, Word as W};

const LITERAL: &[&[Slot]] = &[
    &[W("the"), A, W("is"), O],
    &[W("the"), A, W("was"), O],
    &[W("we"), W("had"), O, A],
    &[W("the"), A, W("seemed"), O],
    &[W("they"), W("serve"), O, A],
];

const CONTRASTIVE: &[&[Slot]] = &[
    &[W("the"), A, W("was"), W("not"), O],
    &[W("the"), A, W("is"), W("hardly"), O],
    &[W("i"), W("have"), W("had"), O, A, W("elsewhere")],
    &[W("the"), A, W("was"), W("far"), W("from"), O],
    &[W("the"), A, W("was"), W("supposedly"), O],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_sentences: usize,
    pub max_aspects_per_sentence: usize,
    /// Fraction of sentences in which one clause carries a flipping cue.
    pub contrastive_fraction: f64,
    /// Number of aspect terms drawn from the built-in list.
    pub n_aspect_terms: usize,
    /// Opinion words per polarity drawn from the built-in lists.
    pub n_opinion_terms: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_sentences: 1000,
            max_aspects_per_sentence: 3,
            contrastive_fraction: 0.5,
            n_aspect_terms: ASPECT_TERMS.len(),
            n_opinion_terms: POSITIVE_TERMS.len(),
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sentences == 0 {
            return Err(Error::validation("n_sentences must be at least 1"));
        }
        if self.max_aspects_per_sentence == 0 {
            return Err(Error::validation("max_aspects_per_sentence must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.contrastive_fraction) {
            return Err(Error::validation("contrastive_fraction must lie in [0, 1]"));
        }
        if self.n_aspect_terms < self.max_aspects_per_sentence {
            return Err(Error::validation(
                "n_aspect_terms must be at least max_aspects_per_sentence",
            ));
        }
        if self.n_opinion_terms == 0 {
            return Err(Error::validation("n_opinion_terms must be at least 1"));
        }
        Ok(())
    }

    /// Aspect counts are uniform over `1..=max_aspects_per_sentence`.
    pub fn expected_aspects_per_sentence(&self) -> f64 {
        (1.0 + self.max_aspects_per_sentence as f64) / 2.0
    }
}

/// The word lists a generator configuration draws from.
#[derive(Clone, Debug)]
pub struct Lexicon {
    aspects: Vec<Vec<&'static str>>,
    opinions: [Vec<&'static str>; 3],
}

impl Lexicon {
    pub fn new(cfg: &SynthConfig) -> Self {
        let take = |list: &[&'static str], n: usize| list[..n.min(list.len())].to_vec();
        Self {
            aspects: ASPECT_TERMS[..cfg.n_aspect_terms.min(ASPECT_TERMS.len())]
                .iter()
                .map(|t| t.split(' ').collect())
                .collect(),
            opinions: [
                take(POSITIVE_TERMS, cfg.n_opinion_terms),
                take(NEUTRAL_TERMS, cfg.n_opinion_terms),
                take(NEGATIVE_TERMS, cfg.n_opinion_terms),
            ],
        }
    }

    /// Lexicon polarity of an opinion word, if it is one.
    pub fn opinion_polarity(&self, word: &str) -> Option<Polarity> {
        Polarity::ALL
            .into_iter()
            .find(|p| self.opinions[p.index()].contains(&word))
    }

    pub fn aspect_terms(&self) -> &[Vec<&'static str>] {
        &self.aspects
    }
}

struct Builder {
    tokens: Vec<String>,
    aspects: Vec<Aspect>,
    opinions: Vec<Span>,
}

impl Builder {
    fn words(&mut self, ws: &[&str]) {
        self.tokens.extend(ws.iter().map(|w| w.to_string()));
    }

    fn clause(&mut self, template: &[Slot], aspect: &[&str], opinion: &str, gold: Polarity) {
        let mut a_span = None;
        let mut o_span = None;
        for slot in template {
            match slot {
                Slot::Word(w) => self.words(&[w]),
                Slot::Aspect => {
                    let start = self.tokens.len();
                    self.words(aspect);
                    a_span = Some(Span::new(start, self.tokens.len()));
                }
                Slot::Opinion => {
                    let start = self.tokens.len();
                    self.words(&[opinion]);
                    o_span = Some(Span::new(start, self.tokens.len()));
                }
            }
        }
        self.aspects
            .push(Aspect::new(a_span.expect("template has aspect"), gold));
        self.opinions.push(o_span.expect("template has opinion"));
    }
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let lex = Lexicon::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sentences = Vec::with_capacity(cfg.n_sentences);
    for _ in 0..cfg.n_sentences {
        sentences.push(sentence(&lex, cfg, &mut rng));
    }
    Corpus::new(format!("synthetic-{}", cfg.seed), Split::Train, sentences)
}

fn sentence(lex: &Lexicon, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> AnnotatedSentence {
    let k = rng.gen_range(1..=cfg.max_aspects_per_sentence);
    let aspects: Vec<&Vec<&str>> = lex.aspects.choose_multiple(rng, k).collect();
    let flipped_clause = if rng.gen_bool(cfg.contrastive_fraction) {
        Some(rng.gen_range(0..k))
    } else {
        None
    };

    let mut b = Builder {
        tokens: Vec::new(),
        aspects: Vec::new(),
        opinions: Vec::new(),
    };
    if rng.gen_bool(0.4) {
        b.words(PREFIXES.choose(rng).expect("non-empty"));
    }
    for (i, aspect) in aspects.iter().enumerate() {
        if i > 0 {
            b.words(CONNECTORS.choose(rng).expect("non-empty"));
        }
        if flipped_clause == Some(i) {
            let surface = if rng.gen_bool(0.5) {
                Polarity::Pos
            } else {
                Polarity::Neg
            };
            let word = lex.opinions[surface.index()].choose(rng).expect("non-empty");
            let template = CONTRASTIVE.choose(rng).expect("non-empty");
            b.clause(template, aspect, word, surface.flipped());
        } else {
            let polarity = Polarity::ALL[rng.gen_range(0..3)];
            let word = lex.opinions[polarity.index()].choose(rng).expect("non-empty");
            let template = LITERAL.choose(rng).expect("non-empty");
            b.clause(template, aspect, word, polarity);
        }
    }
    b.words(&[ENDINGS.choose(rng).expect("non-empty")]);

    let pairs = (0..b.aspects.len()).map(|i| (i, i)).collect();
    AnnotatedSentence {
        tokens: b.tokens,
        aspects: b.aspects,
        opinions: b.opinions,
        pairs,
    }
}

/// Seeded 80/10/10 split into train, dev and test corpora.
pub fn split_corpus(corpus: &Corpus, seed: u64) -> (Corpus, Corpus, Corpus) {
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 8 / 10;
    let n_dev = n / 10;
    let take = |idx: &[usize], split: Split| Corpus {
        name: corpus.name.clone(),
        split,
        sentences: idx.iter().map(|&i| corpus.sentences[i].clone()).collect(),
    };
    (
        take(&order[..n_train], Split::Train),
        take(&order[n_train..n_train + n_dev], Split::Dev),
        take(&order[n_train + n_dev..], Split::Test),
    )
}
