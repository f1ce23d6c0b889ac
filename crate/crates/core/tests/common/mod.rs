//! Fixtures shared by the integration tests, including a brute-force
//! scorer that recomputes every metric from plain lists.

#![allow(dead_code)]

use dcran::autodiff::{ParamStore, Tensor};
use dcran::corpus::{generate_synthetic, Corpus, Polarity, Span, SynthConfig};
use dcran::encoder::ModelConfig;
use dcran::metrics::SentenceLabels;
use dcran::text::{build_vocab, encode_absa, pad_batch, Batch, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn synth(n: usize, contrastive: f64, seed: u64) -> Corpus {
    generate_synthetic(&SynthConfig {
        n_sentences: n,
        contrastive_fraction: contrastive,
        seed,
        ..Default::default()
    })
    .unwrap()
}

/// Width-16 model with one encoder layer and one decoder block.
pub fn small_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        d_h: 16,
        n_enc_layers: 1,
        n_dec_layers: 1,
        n_heads: 2,
        ffn_dim: 32,
        max_len: 48,
        dropout: 0.0,
        vocab_size,
        ..Default::default()
    }
}

pub fn vocab_and_batch(corpus: &Corpus, count: usize) -> (Vocabulary, Batch) {
    let vocab = build_vocab(corpus, 1).unwrap();
    let batch = pad_batch(
        corpus.sentences[..count]
            .iter()
            .map(|s| encode_absa(s, &vocab).unwrap())
            .collect(),
    )
    .unwrap();
    (vocab, batch)
}

/// Replaces every tensor with values uniform in `[-0.5, 0.5)`.
pub fn randomize(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        let [r, c] = store.get(id).shape();
        let data = (0..r * c).map(|_| rng.gen_range(-0.5..0.5)).collect();
        store.set(id, Tensor::new(r, c, data).unwrap()).unwrap();
    }
}

fn random_polarity<R: Rng>(rng: &mut R) -> Polarity {
    Polarity::ALL[rng.gen_range(0..3)]
}

/// Disjoint spans over `0..len`, each started with probability `p`.
fn random_spans<R: Rng>(len: usize, p: f64, rng: &mut R) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < len {
        if rng.gen_bool(p) {
            let end = (i + rng.gen_range(1..=3)).min(len);
            spans.push(Span::new(i, end));
            i = end + rng.gen_range(0..2);
        } else {
            i += 1;
        }
    }
    spans
}

/// A gold annotation and a noisy prediction for one random sentence. The
/// prediction keeps, drops, reshapes or relabels gold chunks and adds
/// spurious ones.
pub fn random_pair<R: Rng>(rng: &mut R) -> (SentenceLabels, SentenceLabels) {
    let len = rng.gen_range(1..=14);
    let gold = SentenceLabels {
        aspects: random_spans(len, 0.25, rng)
            .into_iter()
            .map(|s| (s, random_polarity(rng)))
            .collect(),
        opinions: random_spans(len, 0.2, rng),
    };
    let mut aspects = Vec::new();
    for &(span, pol) in &gold.aspects {
        match rng.gen_range(0..5) {
            0 => {}
            1 => aspects.push((span, random_polarity(rng))),
            2 => aspects.push((Span::new(span.start, (span.end + 1).min(len).max(span.start + 1)), pol)),
            _ => aspects.push((span, pol)),
        }
    }
    if rng.gen_bool(0.3) {
        let s = rng.gen_range(0..len);
        aspects.push((Span::new(s, s + 1), random_polarity(rng)));
    }
    let mut opinions: Vec<Span> = gold.opinions.iter().copied().filter(|_| rng.gen_bool(0.7)).collect();
    if rng.gen_bool(0.3) {
        let s = rng.gen_range(0..len);
        opinions.push(Span::new(s, s + 1));
    }
    (gold, SentenceLabels { aspects, opinions })
}

fn dedup<T: PartialEq + Copy>(items: &[T]) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for &x in items {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

fn prf(matched: usize, gold: usize, predicted: usize) -> f64 {
    let p = if predicted == 0 { 0.0 } else { matched as f64 / predicted as f64 };
    let r = if gold == 0 { 0.0 } else { matched as f64 / gold as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn micro<T: PartialEq + Copy>(gold: &[Vec<T>], pred: &[Vec<T>]) -> f64 {
    let (mut m, mut g, mut p) = (0, 0, 0);
    for (gs, ps) in gold.iter().zip(pred) {
        let gs = dedup(gs);
        let ps = dedup(ps);
        g += gs.len();
        p += ps.len();
        m += gs.iter().filter(|x| ps.contains(x)).count();
    }
    prf(m, g, p)
}

/// `[ate_f1, ote_f1, asc_f1, absa_f1, sent_acc]` by exhaustive list scans.
pub fn oracle_scores(gold: &[SentenceLabels], pred: &[SentenceLabels]) -> [f64; 5] {
    let spans = |l: &SentenceLabels| l.aspects.iter().map(|a| a.0).collect::<Vec<_>>();
    let ate = micro(
        &gold.iter().map(spans).collect::<Vec<_>>(),
        &pred.iter().map(spans).collect::<Vec<_>>(),
    );
    let ote = micro(
        &gold.iter().map(|l| l.opinions.clone()).collect::<Vec<_>>(),
        &pred.iter().map(|l| l.opinions.clone()).collect::<Vec<_>>(),
    );
    let absa = micro(
        &gold.iter().map(|l| l.aspects.clone()).collect::<Vec<_>>(),
        &pred.iter().map(|l| l.aspects.clone()).collect::<Vec<_>>(),
    );

    let mut pairs = Vec::new();
    for (g, p) in gold.iter().zip(pred) {
        let mut seen = Vec::new();
        for &(span, pol) in &g.aspects {
            if seen.contains(&span) {
                continue;
            }
            seen.push(span);
            if let Some(&(_, q)) = p.aspects.iter().find(|a| a.0 == span) {
                pairs.push((pol, q));
            }
        }
    }
    let mut per_class = Vec::new();
    for class in Polarity::ALL {
        let support = pairs.iter().filter(|x| x.0 == class).count();
        if support > 0 {
            let tp = pairs.iter().filter(|x| x.0 == class && x.1 == class).count();
            let predicted = pairs.iter().filter(|x| x.1 == class).count();
            per_class.push(prf(tp, support, predicted));
        }
    }
    let asc = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().sum::<f64>() / per_class.len() as f64
    };

    let exact = gold
        .iter()
        .zip(pred)
        .filter(|(g, p)| {
            let g = dedup(&g.aspects);
            let p = dedup(&p.aspects);
            g.len() == p.len() && g.iter().all(|x| p.contains(x))
        })
        .count();
    let sent = if gold.is_empty() { 0.0 } else { exact as f64 / gold.len() as f64 };
    [ate, ote, asc, absa, sent]
}
