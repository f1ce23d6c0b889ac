mod common;

use common::{oracle_scores, random_pair};
use dcran::corpus::{Polarity, Span};
use dcran::metrics::{evaluate, score, SentenceLabels};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_set(seed: u64, n: usize) -> (Vec<SentenceLabels>, Vec<SentenceLabels>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_pair(&mut rng)).unzip()
}

fn scores(r: &dcran::metrics::MetricsReport) -> [f64; 5] {
    [r.ate_f1, r.ote_f1, r.asc_f1, r.absa_f1, r.sent_acc]
}

#[test]
fn agrees_with_brute_force_per_sentence_and_pooled() {
    let (gold, pred) = random_set(11, 1000);
    for (g, p) in gold.iter().zip(&pred) {
        let r = score(std::slice::from_ref(g), std::slice::from_ref(p)).unwrap();
        assert_eq!(scores(&r), oracle_scores(std::slice::from_ref(g), std::slice::from_ref(p)));
    }
    let r = score(&gold, &pred).unwrap();
    assert_eq!(scores(&r), oracle_scores(&gold, &pred));
}

#[test]
fn strata_match_filtered_recomputation() {
    let (gold, pred) = random_set(12, 400);
    let report = evaluate(&gold, &pred).unwrap();
    let strata = report.strata.unwrap();
    let filter = |keep: fn(usize) -> bool| -> (Vec<_>, Vec<_>) {
        gold.iter()
            .zip(&pred)
            .filter(|(g, _)| keep(g.aspects.len()))
            .map(|(g, p)| (g.clone(), p.clone()))
            .unzip()
    };
    let (g1, p1) = filter(|n| n == 1);
    let (gm, pm) = filter(|n| n >= 2);
    assert_eq!(scores(&strata.single_aspect.unwrap()), oracle_scores(&g1, &p1));
    assert_eq!(scores(&strata.multiple_aspect.unwrap()), oracle_scores(&gm, &pm));
    let zero = gold.iter().filter(|g| g.aspects.is_empty()).count();
    assert_eq!(strata.zero_aspect_sentences, zero);
    assert_eq!(g1.len() + gm.len() + zero, gold.len());
}

#[test]
fn perfect_prediction_scores_one() {
    let (gold, _) = random_set(13, 200);
    let r = score(&gold, &gold).unwrap();
    assert_eq!(scores(&r), [1.0; 5]);
}

#[test]
fn rotated_polarity_keeps_extraction_but_not_joint_score() {
    let (gold, _) = random_set(14, 200);
    let rotated: Vec<SentenceLabels> = gold
        .iter()
        .map(|g| SentenceLabels {
            aspects: g.aspects.iter().map(|&(s, p)| (s, Polarity::ALL[(p.index() + 1) % 3])).collect(),
            opinions: g.opinions.clone(),
        })
        .collect();
    let r = score(&gold, &rotated).unwrap();
    assert_eq!(r.ate_f1, 1.0);
    assert_eq!(r.absa_f1, 0.0);
    assert_eq!(r.asc_f1, 0.0);
}

#[test]
fn misaligned_inputs_are_rejected() {
    let (gold, pred) = random_set(15, 5);
    assert!(score(&gold, &pred[..4]).is_err());
    assert!(evaluate(&gold[..3], &pred).is_err());
}

fn labels_strategy() -> impl Strategy<Value = (Vec<SentenceLabels>, Vec<SentenceLabels>)> {
    (any::<u64>(), 1usize..60).prop_map(|(seed, n)| random_set(seed, n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn joint_score_never_exceeds_extraction((gold, pred) in labels_strategy()) {
        let r = score(&gold, &pred).unwrap();
        prop_assert!(r.absa_f1 <= r.ate_f1);
        prop_assert!(r.absa_counts.matched <= r.ate_counts.matched);
    }

    #[test]
    fn scores_lie_in_unit_interval((gold, pred) in labels_strategy()) {
        let r = score(&gold, &pred).unwrap();
        for v in scores(&r) {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn invariant_to_chunk_order((gold, pred) in labels_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shuffle = |v: &[SentenceLabels], rng: &mut ChaCha8Rng| -> Vec<SentenceLabels> {
            v.iter()
                .map(|l| {
                    let mut a = l.aspects.clone();
                    let mut o = l.opinions.clone();
                    for i in (1..a.len()).rev() { a.swap(i, rng.gen_range(0..=i)); }
                    for i in (1..o.len()).rev() { o.swap(i, rng.gen_range(0..=i)); }
                    SentenceLabels { aspects: a, opinions: o }
                })
                .collect()
        };
        let distinct = |v: &[SentenceLabels]| v.iter().all(|l| {
            let spans: Vec<Span> = l.aspects.iter().map(|a| a.0).collect();
            spans.iter().enumerate().all(|(i, s)| !spans[..i].contains(s))
        });
        prop_assume!(distinct(&pred));
        let r1 = score(&gold, &pred).unwrap();
        let r2 = score(&shuffle(&gold, &mut rng), &shuffle(&pred, &mut rng)).unwrap();
        prop_assert_eq!(scores(&r1), scores(&r2));
    }

    #[test]
    fn sentence_accuracy_counts_exact_sets((gold, pred) in labels_strategy()) {
        let r = score(&gold, &pred).unwrap();
        let exact = gold.iter().zip(&pred).filter(|(g, p)| {
            let mut a = g.aspects.clone();
            let mut b = p.aspects.clone();
            let key = |x: &(Span, Polarity)| (x.0.start, x.0.end, x.1.index());
            a.sort_by_key(key);
            a.dedup();
            b.sort_by_key(key);
            b.dedup();
            a == b
        }).count();
        prop_assert_eq!(r.sent_acc, exact as f64 / gold.len() as f64);
        prop_assert!(r.sent_acc <= 1.0);
        let any_aspect = r.absa_counts.gold + r.absa_counts.predicted > 0;
        if r.sent_acc == 1.0 && any_aspect {
            prop_assert_eq!(r.absa_f1, 1.0);
        }
    }
}
